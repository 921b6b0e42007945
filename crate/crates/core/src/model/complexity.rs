//! Closed-form parameter and FLOP counts.
//!
//! One multiply-add is two FLOPs. Per-op costs match what the tape records:
//! convolutions `2·Cin·K²` per output plus one per output for a bias, depthwise
//! `2·K²` per output, BN 2 per element, activations / adds / products 1 per
//! element, pooling 1 per input element, the channel conv 6 per output,
//! bilinear upsampling 8 per output, radix softmax 3 per element. The
//! local-contrast attention adds [`LCA_FLOPS_PER_PIXEL`] per pixel.

use super::{block_specs, gate_width, ModelConfig};

/// Four maps of three taps each (2 multiplies + 2 adds), two products, one
/// sum, and the sigmoid counted as 4.
pub const LCA_FLOPS_PER_PIXEL: u64 = 20;

pub fn conv_params(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cout * cin * k * k + if bias { cout } else { 0 }
}

/// FLOPs of a dense convolution producing `cout × out_pixels` values.
pub fn conv_flops(cin: usize, cout: usize, k: usize, bias: bool, out_pixels: usize) -> u64 {
    let out = (cout * out_pixels) as u64;
    2 * (cin * k * k) as u64 * out + if bias { out } else { 0 }
}

fn bn_params(c: usize) -> usize {
    2 * c
}

/// Learnable scalars of a network with this configuration.
pub fn count_params(config: &ModelConfig) -> usize {
    let c = config.base_channels;
    let mut total = conv_params(1, c, 1, true) + c * 9 + bn_params(c) + 1;
    for layer in block_specs(config) {
        for b in &layer {
            total += conv_params(b.cin, b.cout, 3, false) + bn_params(b.cout);
            total += 2 * (conv_params(b.cout, b.cout, 3, false) + bn_params(b.cout));
            let g = gate_width(b.cout);
            total += conv_params(b.cout, g, 1, true) + conv_params(g, 2 * b.cout, 1, true);
            if b.has_projection() {
                total += conv_params(b.cin, b.cout, 1, false) + bn_params(b.cout);
            }
        }
        total += 3;
    }
    for level in 1..=3 {
        let cin = config.layer_width(level);
        total += conv_params(cin, cin / 2, 1, false) + bn_params(cin / 2);
    }
    total + conv_params(c, c, 3, false) + bn_params(c) + conv_params(c, 1, 1, true)
}

/// FLOPs of one forward pass on a single `height × width` image.
pub fn count_flops(config: &ModelConfig, height: usize, width: usize) -> u64 {
    let c = config.base_channels as u64;
    let px = height * width;
    let p = px as u64;

    let mut f = conv_flops(1, config.base_channels, 1, true, px);
    f += c * p; // attention product
    f += 18 * c * p; // depthwise 3×3
    f += 2 * c * p; // BN
    f += c * p + c * p; // residual add, PReLU
    if config.use_lce {
        f += LCA_FLOPS_PER_PIXEL * p;
    }

    let mut level_px = [0usize; 4];
    let mut cur_px = px;
    for (layer, blocks) in block_specs(config).iter().enumerate() {
        for b in blocks {
            let in_px = cur_px;
            let out_px = in_px / (b.stride * b.stride);
            let (co, op) = (b.cout as u64, out_px as u64);
            f += conv_flops(b.cin, b.cout, 3, false, out_px) + 2 * co * op + co * op;
            f += 2 * (conv_flops(b.cout, b.cout, 3, false, out_px) + 2 * co * op + co * op);
            f += co * op; // branch sum
            f += co * op; // pooling
            let g = gate_width(b.cout);
            f += conv_flops(b.cout, g, 1, true, 1) + g as u64;
            f += conv_flops(g, 2 * b.cout, 1, true, 1);
            f += 3 * 2 * co; // radix softmax
            f += 3 * co * op; // two gated products and their sum
            if b.has_projection() {
                f += conv_flops(b.cin, b.cout, 1, false, out_px) + 2 * co * op;
            }
            f += 2 * co * op; // residual add, ReLU
            cur_px = out_px;
        }
        level_px[layer] = cur_px;
        let (co, op) = (config.layer_width(layer) as u64, cur_px as u64);
        f += co * op + 6 * co + co + co * op + co * op;
    }

    for level in (1..=3).rev() {
        let cin = config.layer_width(level);
        let half = (cin / 2) as u64;
        let deep_px = level_px[level];
        let d = deep_px as u64;
        f += conv_flops(cin, cin / 2, 1, false, deep_px) + 2 * half * d + half * d;
        let up = level_px[level - 1] as u64;
        f += 8 * half * up + half * up;
    }

    f += conv_flops(config.base_channels, config.base_channels, 3, false, px) + 2 * c * p + c * p;
    f + conv_flops(config.base_channels, 1, 1, true, px) + p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_counts() {
        assert_eq!(conv_params(1, 8, 3, true), 80);
        assert_eq!(conv_flops(8, 8, 1, true, 64 * 64), 2 * 8 * 8 * 64 * 64 + 8 * 64 * 64);
    }
}
