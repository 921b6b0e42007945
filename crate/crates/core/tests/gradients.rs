use lcae_core::gradcheck::{check_inputs, check_network, op_suite};
use lcae_core::model::{LcaeNet, ModelConfig};
use ndarray::{Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..2 {
        for (name, rep) in op_suite(seed).unwrap() {
            assert!(rep.checked >= 10, "{name}: only {} entries", rep.checked);
            assert!(rep.max_rel_err < 1e-4, "{name}: {} at {}", rep.max_rel_err, rep.worst);
        }
    }
}

#[test]
fn activations_are_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 2, 5]), || rng.random_range(-3.0..3.0));
    let slope = ArrayD::from_elem(IxDyn(&[1]), 0.25);
    let checks = [
        check_inputs(&[x.clone(), slope], None, 0, |t, v| {
            let y = t.prelu(v[0], v[1])?;
            Ok(t.sum(y))
        }),
        check_inputs(&[x.clone()], None, 0, |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        }),
        check_inputs(&[x], None, 0, |t, v| {
            let y = t.sigmoid(v[0]);
            Ok(t.sum(y))
        }),
    ];
    for rep in checks {
        let rep = rep.unwrap();
        assert!(rep.checked >= 10);
        assert!(rep.max_rel_err < 1e-6, "{} at {}", rep.max_rel_err, rep.worst);
    }
}

#[test]
fn whole_network_matches_finite_differences() {
    let config = ModelConfig { base_channels: 4, input_size: [16, 16], ..ModelConfig::default() };
    let net = LcaeNet::new(config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = Array4::from_shape_simple_fn((2, 1, 16, 16), || rng.random_range(-1.0..1.0));
    let attention = net.attention(images.view()).unwrap();
    let target = ArrayD::from_shape_fn(IxDyn(&[2, 1, 16, 16]), |ix| {
        let (r, c) = (ix[2] as i64 - 8, ix[3] as i64 - 5 - 4 * ix[0] as i64);
        f64::from(u8::from(r * r + c * c <= 4))
    });
    let rep = check_network(&net, &images, &attention, &target, Some(3), 11).unwrap();
    let tensors = net.store.params().count();
    assert!(rep.checked >= 2 * tensors);
    assert!(rep.max_rel_err < 1e-4, "{} at {}", rep.max_rel_err, rep.worst);
}
