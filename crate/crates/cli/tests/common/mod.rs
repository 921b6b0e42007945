#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use lcae_core::data::{self, Sample, Subset};
use lcae_core::lca::GrayImage;
use lcae_core::model::BinaryMask;

pub struct Run {
    pub code: i32,
    pub out: String,
    pub err: String,
}

pub fn lcae(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("lcae").chain(args.iter().copied());
    let code = lcae_cli::run(argv, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

/// Runs a command that must succeed and returns its standard output.
pub fn ok(args: &[&str]) -> String {
    let r = lcae(args);
    assert_eq!(r.code, 0, "lcae {args:?} failed: {}", r.err);
    r.out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file below `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// `n` test and `n` train samples whose masks cover the whole image.
pub fn full_mask_dataset(root: &Path, n: usize, size: usize) {
    let samples: Vec<(Sample, Subset)> = (0..2 * n)
        .map(|i| {
            let img = GrayImage::new(ndarray::Array2::from_shape_fn((size, size), |(r, c)| ((r * 7 + c * 3 + i) % 50) as f64)).unwrap();
            let mask = BinaryMask::from_fn(size, size, |_, _| true);
            let sub = if i < n { Subset::Train } else { Subset::Test };
            (Sample::new(img, mask, format!("f{i:03}")).unwrap(), sub)
        })
        .collect();
    data::write_dataset(root, &samples).unwrap();
}

pub fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
