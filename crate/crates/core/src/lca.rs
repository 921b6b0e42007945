//! Local contrast distance (LCD) maps and local contrast attention (LCA) weights.
//!
//! Four fixed, dilated `(2d+1)×(2d+1)` operators compare each pixel with the two
//! pixels opposite each other at offset `d` along one direction:
//!
//! ```text
//! lcd(m, n) = alpha * x(m, n) - beta * (x(m - dm, n - dn) + x(m + dm, n + dn))
//! ```
//!
//! with `(dm, dn)` one of `(d, d)`, `(d, -d)`, `(0, d)`, `(d, 0)`. The attention
//! weight is `sigmoid(lcd_a * lcd_b + lcd_c * lcd_d)` for a fixed pairing of the
//! four maps. Pixels outside the image read as zero, so every map is `H×W`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The prior-knowledge triple parameterising the fixed operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcaParams {
    /// Weight of the centre tap.
    pub alpha: f64,
    /// Weight of each of the two neighbour taps.
    pub beta: f64,
    /// Dilation: pixel offset between the centre and its neighbours.
    pub d: usize,
}

impl Default for LcaParams {
    fn default() -> Self {
        LcaParams { alpha: 1.0, beta: 0.5, d: 1 }
    }
}

impl LcaParams {
    pub fn new(alpha: f64, beta: f64, d: usize) -> Result<Self> {
        let p = LcaParams { alpha, beta, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.d == 0 {
            return Err(Error::Config("dilation d must be >= 1".into()));
        }
        Ok(())
    }

    /// Side length of the square operator footprint.
    pub fn operator_size(&self) -> usize {
        2 * self.d + 1
    }

    /// The four `L×L` fixed operators, in [`Direction::ALL`] order.
    pub fn operators(&self) -> [Array2<f64>; 4] {
        Direction::ALL.map(|dir| dir.operator(self))
    }

    /// The 24-point `(d, alpha, beta)` grid used for hyperparameter sweeps.
    pub fn sweep_grid() -> Vec<LcaParams> {
        let mut grid = Vec::with_capacity(24);
        for d in 1..=4 {
            for alpha in [1.0, 1.5, 2.0] {
                for beta in [0.5, 1.0] {
                    grid.push(LcaParams { alpha, beta, d });
                }
            }
        }
        grid
    }
}

/// Direction of a fixed operator's neighbour pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Neighbours at `(m-d, n-d)` and `(m+d, n+d)`.
    Diagonal,
    /// Neighbours at `(m-d, n+d)` and `(m+d, n-d)`.
    AntiDiagonal,
    /// Neighbours at `(m, n-d)` and `(m, n+d)`.
    Horizontal,
    /// Neighbours at `(m-d, n)` and `(m+d, n)`.
    Vertical,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Diagonal,
        Direction::AntiDiagonal,
        Direction::Horizontal,
        Direction::Vertical,
    ];

    /// Unit step `(dm, dn)`; the neighbours sit at `±d·step`.
    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::Diagonal => (1, 1),
            Direction::AntiDiagonal => (1, -1),
            Direction::Horizontal => (0, 1),
            Direction::Vertical => (1, 0),
        }
    }

    /// Dense `L×L` operator: `alpha` at the centre, `-beta` at both neighbours, zero elsewhere.
    pub fn operator(self, params: &LcaParams) -> Array2<f64> {
        let l = params.operator_size();
        let c = params.d as isize;
        let (dm, dn) = self.step();
        let mut k = Array2::zeros((l, l));
        k[[c as usize, c as usize]] = params.alpha;
        k[[(c - c * dm) as usize, (c - c * dn) as usize]] = -params.beta;
        k[[(c + c * dm) as usize, (c + c * dn) as usize]] = -params.beta;
        k
    }
}

/// How the four LCD maps are paired into the two products inside the sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// `diagonal·anti_diagonal + horizontal·vertical`.
    #[default]
    DiagonalsThenAxes,
    /// `diagonal·horizontal + anti_diagonal·vertical`.
    Interleaved,
}

/// Single-channel intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Array2<f64>,
}

impl GrayImage {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("image must be non-empty, got {h}x{w}")));
        }
        if let Some(pos) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite pixel at ({}, {})",
                pos / w,
                pos % w
            )));
        }
        Ok(GrayImage { pixels })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let pixels = Array2::from_shape_vec((height, width), data)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(pixels)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    /// Zero outside the image.
    #[inline]
    fn at(&self, m: isize, n: isize) -> f64 {
        if m < 0 || n < 0 || m >= self.height() as isize || n >= self.width() as isize {
            0.0
        } else {
            self.pixels[[m as usize, n as usize]]
        }
    }
}

/// The four directional contrast maps, each `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LcdMaps {
    pub diagonal: Array2<f64>,
    pub anti_diagonal: Array2<f64>,
    pub horizontal: Array2<f64>,
    pub vertical: Array2<f64>,
}

impl LcdMaps {
    pub fn get(&self, dir: Direction) -> &Array2<f64> {
        match dir {
            Direction::Diagonal => &self.diagonal,
            Direction::AntiDiagonal => &self.anti_diagonal,
            Direction::Horizontal => &self.horizontal,
            Direction::Vertical => &self.vertical,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.diagonal.dim()
    }
}

/// Attention weights, one per pixel, in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LcaWeights(pub Array2<f64>);

impl LcaWeights {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

fn check_footprint(image: &GrayImage, params: &LcaParams) -> Result<()> {
    params.validate()?;
    let l = params.operator_size();
    if image.height() < l || image.width() < l {
        return Err(Error::Dimension(format!(
            "image {}x{} is smaller than the {l}x{l} operator footprint (d = {})",
            image.height(),
            image.width(),
            params.d
        )));
    }
    Ok(())
}

/// Zero-padded "same" cross-correlation of `image` with a dense kernel, visiting
/// only its non-zero taps.
fn correlate_same(image: &GrayImage, kernel: &Array2<f64>) -> Array2<f64> {
    let (kh, kw) = kernel.dim();
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let taps: Vec<(isize, isize, f64)> = kernel
        .indexed_iter()
        .filter(|(_, &w)| w != 0.0)
        .map(|((i, j), &w)| (i as isize - ch, j as isize - cw, w))
        .collect();
    Array2::from_shape_fn((image.height(), image.width()), |(m, n)| {
        taps.iter()
            .map(|&(di, dj, w)| w * image.at(m as isize + di, n as isize + dj))
            .sum()
    })
}

/// Applies the four fixed operators to `image`.
pub fn lcd_maps(image: &GrayImage, params: &LcaParams) -> Result<LcdMaps> {
    check_footprint(image, params)?;
    let [diagonal, anti_diagonal, horizontal, vertical] =
        params.operators().map(|k| correlate_same(image, &k));
    Ok(LcdMaps { diagonal, anti_diagonal, horizontal, vertical })
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Combines LCD maps into attention weights using the default pairing.
pub fn lca_weights(maps: &LcdMaps) -> Result<LcaWeights> {
    lca_weights_with(maps, Pairing::default())
}

pub fn lca_weights_with(maps: &LcdMaps, pairing: Pairing) -> Result<LcaWeights> {
    let dim = maps.dim();
    for dir in Direction::ALL {
        if maps.get(dir).dim() != dim {
            return Err(Error::Dimension(format!(
                "LCD map {dir:?} is {:?}, expected {dim:?}",
                maps.get(dir).dim()
            )));
        }
    }
    let (a, b, c, d) = match pairing {
        Pairing::DiagonalsThenAxes => {
            (&maps.diagonal, &maps.anti_diagonal, &maps.horizontal, &maps.vertical)
        }
        Pairing::Interleaved => {
            (&maps.diagonal, &maps.horizontal, &maps.anti_diagonal, &maps.vertical)
        }
    };
    let mut out = Array2::zeros(dim);
    ndarray::Zip::from(&mut out)
        .and(a)
        .and(b)
        .and(c)
        .and(d)
        .for_each(|o, &a, &b, &c, &d| *o = sigmoid(a * b + c * d));
    Ok(LcaWeights(out))
}

/// `lca_weights(lcd_maps(image))`.
pub fn attention(image: &GrayImage, params: &LcaParams) -> Result<LcaWeights> {
    lca_weights(&lcd_maps(image, params)?)
}

pub fn attention_with(image: &GrayImage, params: &LcaParams, pairing: Pairing) -> Result<LcaWeights> {
    lca_weights_with(&lcd_maps(image, params)?, pairing)
}

/// Reference evaluation by direct neighbour lookup; no operator construction.
pub fn lca_oracle(image: &GrayImage, params: &LcaParams) -> Result<LcaWeights> {
    lca_oracle_with(image, params, Pairing::default())
}

pub fn lca_oracle_with(image: &GrayImage, params: &LcaParams, pairing: Pairing) -> Result<LcaWeights> {
    check_footprint(image, params)?;
    let (alpha, beta, d) = (params.alpha, params.beta, params.d as isize);
    let mut out = Array2::zeros((image.height(), image.width()));
    for m in 0..image.height() as isize {
        for n in 0..image.width() as isize {
            let x = image.at(m, n);
            let diag = alpha * x - beta * (image.at(m - d, n - d) + image.at(m + d, n + d));
            let anti = alpha * x - beta * (image.at(m - d, n + d) + image.at(m + d, n - d));
            let horiz = alpha * x - beta * (image.at(m, n - d) + image.at(m, n + d));
            let vert = alpha * x - beta * (image.at(m - d, n) + image.at(m + d, n));
            let z = match pairing {
                Pairing::DiagonalsThenAxes => diag * anti + horiz * vert,
                Pairing::Interleaved => diag * horiz + anti * vert,
            };
            out[[m as usize, n as usize]] = 1.0 / (1.0 + (-z).exp());
        }
    }
    Ok(LcaWeights(out))
}
