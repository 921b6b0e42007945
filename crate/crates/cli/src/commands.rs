use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lcae_core::data::{self, Dataset, Sample, Subset};
use lcae_core::lca::{self, LcaParams};
use lcae_core::metrics::{self, EvalReport};
use lcae_core::model::{count_flops, LcaeNet, ModelConfig};
use lcae_core::train::{self, EpochLog, TrainConfig};
use lcae_core::Error;
use ndarray::{Array2, Array4};

use crate::config::FileConfig;
use crate::{CliError, CliResult, Command, CommonFlags, LcaFlags};

const EVAL_BATCH: usize = 8;

pub fn dispatch(command: Command, w: &mut dyn Write) -> CliResult {
    match command {
        Command::Attend { input, out, raw, raw_intensity, lca, config } => {
            attend(&input, &out, raw.as_deref(), raw_intensity, &lca, config.as_deref(), w)
        }
        Command::Synth { out, count, test_count, targets, size, seed, config } => {
            synth(&out, count, test_count, targets, size, seed, config.as_deref(), w)
        }
        Command::Train { data, out, common, lca, epochs, batch_size, lr, input_size, resume, no_lce } => {
            let opts = TrainOpts { common, lca, epochs, batch_size, lr, input_size, resume, no_lce };
            train_cmd(&data, &out, &opts, w)
        }
        Command::Eval { checkpoint, data, threshold, out } => eval(&checkpoint, &data, threshold, out.as_deref(), w),
        Command::Roc { checkpoint, data, thresholds, out } => roc(&checkpoint, &data, thresholds, out.as_deref(), w),
        Command::Sweep { data, out, dilation, alpha, beta, epochs, base_channels, full, ablation, seeds, seed, config } => {
            let opts = SweepOpts { dilation, alpha, beta, epochs, base_channels, full, seed, config };
            if ablation {
                ablation_cmd(&data, &out, &opts, seeds, w)
            } else {
                sweep(&data, &out, &opts, w)
            }
        }
        Command::Bench { common, lca, size, seconds } => bench(&common, &lca, size, seconds, w),
    }
}

fn apply_lca(params: &mut LcaParams, flags: &LcaFlags) -> CliResult {
    if let Some(a) = flags.alpha {
        params.alpha = a;
    }
    if let Some(b) = flags.beta {
        params.beta = b;
    }
    if let Some(d) = flags.dilation {
        params.d = d;
    }
    params.validate().map_err(|e| CliError::Usage(e.to_string()))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `floor(w · 255 + 0.5)`: 0.5 maps to 128.
pub fn quantize_weight(w: f64) -> u8 {
    (w * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Header line `H W`, then one whitespace-separated row per image row. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn format_raw(values: &Array2<f64>) -> String {
    let (h, w) = values.dim();
    let mut s = format!("{h} {w}\n");
    for row in values.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_raw(text: &str) -> Result<Array2<f64>, Error> {
    let bad = |m: &str| Error::InvalidInput(format!("raw weight file: {m}"));
    let mut tokens = text.split_whitespace();
    let mut dim = || tokens.next().and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| bad("missing size header"));
    let (h, w) = (dim()?, dim()?);
    let values = text
        .lines()
        .skip(1)
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|_| bad("unparsable value")))
        .collect::<Result<Vec<_>, _>>()?;
    Array2::from_shape_vec((h, w), values).map_err(|_| bad("value count does not match header"))
}

fn attend(
    input: &Path,
    out: &Path,
    raw: Option<&Path>,
    raw_intensity: bool,
    flags: &LcaFlags,
    config: Option<&Path>,
    w: &mut dyn Write,
) -> CliResult {
    let cfg = FileConfig::load(config)?;
    let mut params = cfg.model.lca;
    apply_lca(&mut params, flags)?;
    let image = data::load_image(input)?;
    let source = if raw_intensity { image } else { data::standardize(&image) };
    let weights = lca::attention_with(&source, &params, cfg.model.pairing)?;
    data::save_gray8(out, &weights.values().mapv(quantize_weight))?;
    if let Some(raw) = raw {
        write_file(raw, &format_raw(weights.values()))?;
    }
    let (lo, hi) = weights.values().iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    writeln!(w, "attention map {}x{} (min {lo:.6}, max {hi:.6}) written to {}", source.height(), source.width(), out.display())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    out: &Path,
    count: usize,
    test_count: Option<usize>,
    targets: Option<usize>,
    size: Option<usize>,
    seed: Option<u64>,
    config: Option<&Path>,
    w: &mut dyn Write,
) -> CliResult {
    let cfg = FileConfig::load(config)?;
    let mut spec = cfg.synth;
    if let Some(s) = seed.or(cfg.seed) {
        spec.seed = s;
    }
    if let Some(n) = targets {
        spec.min_targets = n;
        spec.max_targets = n;
    }
    if let Some(s) = size {
        spec.height = s;
        spec.width = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let n_test = test_count.unwrap_or(count / 5);
    if n_test > count {
        return Err(CliError::Usage(format!("--test-count {n_test} exceeds --count {count}")));
    }
    let samples = data::synth_dataset(&spec, count - n_test, n_test)?;
    create_dir(out)?;
    data::write_dataset(out, &samples)?;
    write_file(&out.join("synth.toml"), &toml::to_string(&spec).expect("spec serialises"))?;
    writeln!(w, "wrote {count} samples ({} train, {n_test} test) to {}", count - n_test, out.display())?;
    Ok(())
}

struct TrainOpts {
    common: CommonFlags,
    lca: LcaFlags,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    input_size: Option<usize>,
    resume: Option<PathBuf>,
    no_lce: bool,
}

struct Splits {
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_splits(dir: &Path) -> CliResult<Splits> {
    let ds = Dataset::open(dir)?;
    let train = ds.load(Subset::Train)?;
    let test = ds.load(Subset::Test)?;
    Ok(Splits { train, test })
}

/// Smallest multiple of 8 covering the larger side of the first sample.
fn infer_input_size(samples: &[Sample]) -> Option<usize> {
    samples.first().map(|s| {
        let (h, w) = s.dim();
        h.max(w).div_ceil(8) * 8
    })
}

/// Changes the epoch budget, stretching the decay milestones proportionally.
fn fit_epochs(tc: &mut TrainConfig, epochs: usize) {
    let old = tc.epochs.max(1);
    for m in &mut tc.milestones {
        *m = *m * epochs / old;
    }
    tc.milestones.retain(|&m| m > 0 && m < epochs);
    tc.milestones.dedup();
    tc.epochs = epochs;
}

fn resolve_input_size(model: &mut ModelConfig, flag: Option<usize>, from_file: bool, samples: &[Sample]) {
    if let Some(s) = flag.or(if from_file { None } else { infer_input_size(samples) }) {
        model.input_size = [s, s];
    }
}

fn train_cmd(data_dir: &Path, out: &Path, o: &TrainOpts, w: &mut dyn Write) -> CliResult {
    let cfg = FileConfig::load(o.common.config.as_deref())?;
    let seed = o.common.seed.or(cfg.seed).unwrap_or(cfg.train.seed);
    let mut model = cfg.model.clone();
    apply_lca(&mut model.lca, &o.lca)?;
    if let Some(c) = o.common.base_channels {
        model.base_channels = c;
    }
    if o.no_lce {
        model.use_lce = false;
    }
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    if let Some(e) = o.epochs {
        fit_epochs(&mut tc, e);
    }
    if let Some(b) = o.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = o.lr {
        tc.lr0 = lr;
    }
    tc.validate()?;

    let splits = load_splits(data_dir)?;
    if splits.train.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no training samples", data_dir.display())).into());
    }
    resolve_input_size(&mut model, o.input_size, cfg.input_size_given, &splits.train);
    model.validate()?;
    let net = match &o.resume {
        Some(p) => {
            let net = LcaeNet::load(p)?;
            if net.config != model {
                writeln!(w, "note: using the network configuration stored in {}", p.display())?;
            }
            net
        }
        None => LcaeNet::new(model, seed)?,
    };

    create_dir(out)?;
    let resolved = format!(
        "seed = {seed}\n\n[model]\n{}\n[train]\n{}",
        net.config.to_toml(),
        toml::to_string(&tc).expect("config serialises")
    );
    write_file(&out.join("train_config.toml"), &resolved)?;
    let log_path = out.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "{}", EpochLog::CSV_HEADER)?;
    writeln!(w, "training {} parameters on {} samples for {} epochs", net.num_params(), splits.train.len(), tc.epochs)?;

    let mut io_error = None;
    let outcome = train::train_loop(&net, &splits.train, &splits.test, &tc, &mut |e: &EpochLog| {
        let row = e.csv_row();
        if let Err(err) = writeln!(log, "{row}").and_then(|_| log.flush()).and_then(|_| writeln!(w, "{row}")) {
            io_error.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_error {
        return Err(Error::io(&log_path, e).into());
    }
    outcome.best.save(&out.join("best.ckpt"))?;
    outcome.last.save(&out.join("last.ckpt"))?;
    writeln!(w, "best epoch {}", outcome.best_epoch)?;
    if !splits.test.is_empty() {
        let report = train::evaluate(&outcome.best, &splits.test, tc.threshold, EVAL_BATCH)?;
        write_file(&out.join("report.json"), &report.to_json())?;
        writeln!(w, "{}\n{}", EvalReport::CSV_HEADER, report.csv_row())?;
    }
    Ok(())
}

fn check_threshold(t: f64) -> CliResult {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("threshold {t} outside [0, 1]")))
    }
}

fn test_split(data_dir: &Path) -> CliResult<Vec<Sample>> {
    let test = load_splits(data_dir)?.test;
    if test.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no test samples", data_dir.display())).into());
    }
    Ok(test)
}

fn eval(checkpoint: &Path, data_dir: &Path, threshold: f64, out: Option<&Path>, w: &mut dyn Write) -> CliResult {
    check_threshold(threshold)?;
    let net = LcaeNet::load(checkpoint)?;
    let test = test_split(data_dir)?;
    let report = train::evaluate(&net, &test, threshold, EVAL_BATCH)?;
    if let Some(p) = out {
        write_file(p, &report.to_json())?;
    }
    writeln!(w, "{}\n{}", EvalReport::CSV_HEADER, report.csv_row())?;
    Ok(())
}

pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

fn roc(checkpoint: &Path, data_dir: &Path, thresholds: Option<Vec<f64>>, out: Option<&Path>, w: &mut dyn Write) -> CliResult {
    let thresholds = thresholds.unwrap_or_else(default_thresholds);
    if thresholds.is_empty() {
        return Err(CliError::Usage("no thresholds given".into()));
    }
    for &t in &thresholds {
        check_threshold(t)?;
    }
    let net = LcaeNet::load(checkpoint)?;
    let test = test_split(data_dir)?;
    let probs = train::predict_samples(&net, &test, EVAL_BATCH)?;
    let gts: Vec<_> = train::fit_to_input(&test, net.config.input_size)?.into_iter().map(|s| s.mask).collect();
    let table = metrics::roc_table(&metrics::roc(&probs, &gts, &thresholds)?);
    match out {
        Some(p) => {
            write_file(p, &table)?;
            writeln!(w, "ROC table with {} points written to {}", thresholds.len(), p.display())?;
        }
        None => w.write_all(table.as_bytes())?,
    }
    Ok(())
}

struct SweepOpts {
    dilation: Option<Vec<usize>>,
    alpha: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    epochs: Option<usize>,
    base_channels: Option<usize>,
    full: bool,
    seed: Option<u64>,
    config: Option<PathBuf>,
}

/// Quick-budget defaults for sweeps.
pub const SWEEP_EPOCHS: usize = 10;
pub const SWEEP_BASE_CHANNELS: usize = 8;

struct SweepSetup {
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
    splits: Splits,
}

fn sweep_setup(data_dir: &Path, o: &SweepOpts) -> CliResult<SweepSetup> {
    let cfg = FileConfig::load(o.config.as_deref())?;
    let mut model = cfg.model.clone();
    let mut tc = cfg.train.clone();
    if !o.full {
        model.base_channels = SWEEP_BASE_CHANNELS;
        fit_epochs(&mut tc, SWEEP_EPOCHS);
    }
    if let Some(c) = o.base_channels {
        model.base_channels = c;
    }
    if let Some(e) = o.epochs {
        fit_epochs(&mut tc, e);
    }
    let seed = o.seed.or(cfg.seed).unwrap_or(tc.seed);
    tc.seed = seed;
    tc.validate()?;
    let splits = load_splits(data_dir)?;
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::EmptyDataset(format!("{} needs both train and test samples", data_dir.display())).into());
    }
    resolve_input_size(&mut model, None, cfg.input_size_given, &splits.train);
    model.validate()?;
    Ok(SweepSetup { model, train: tc, seed, splits })
}

fn train_and_evaluate(model: ModelConfig, tc: &TrainConfig, seed: u64, splits: &Splits) -> CliResult<EvalReport> {
    let net = LcaeNet::new(model, seed)?;
    let tc = TrainConfig { seed, ..tc.clone() };
    let outcome = train::train_loop(&net, &splits.train, &splits.test, &tc, &mut |_| {})?;
    Ok(train::evaluate(&outcome.best, &splits.test, tc.threshold, EVAL_BATCH)?)
}

fn grid_axis<T: Clone>(given: &Option<Vec<T>>, default: Vec<T>, name: &str) -> CliResult<Vec<T>> {
    match given {
        None => Ok(default),
        Some(v) if v.is_empty() => Err(CliError::Usage(format!("empty grid for --{name}"))),
        Some(v) => Ok(v.clone()),
    }
}

/// One sweep row, with `*` flags on the best IoU, Pd and Fa.
pub struct SweepRow {
    pub params: LcaParams,
    pub report: EvalReport,
}

pub fn sweep_table(rows: &[SweepRow]) -> (String, String) {
    let best_iou = rows.iter().map(|r| r.report.iou).fold(f64::MIN, f64::max);
    let best_pd = rows.iter().map(|r| r.report.pd).filter(|v| !v.is_nan()).fold(f64::MIN, f64::max);
    let best_fa = rows.iter().map(|r| r.report.fa).fold(f64::MAX, f64::min);
    let mut csv = String::from("d,alpha,beta,iou,pd,fa_e6,best\n");
    let mut md = String::from("|  d |  α  |  β  |   IoU    |    Pd    |  Fa (1e-6) |\n|---:|----:|----:|---------:|---------:|-----------:|\n");
    for r in rows {
        let e = &r.report;
        let flags = [(e.iou == best_iou, "iou"), (e.pd == best_pd, "pd"), (e.fa == best_fa, "fa")];
        let best: Vec<&str> = flags.iter().filter(|f| f.0).map(|f| f.1).collect();
        let star = |on: bool| if on { "*" } else { " " };
        let p = &r.params;
        csv.push_str(&format!("{},{},{},{:.6},{:.6},{:.4},{}\n", p.d, p.alpha, p.beta, e.iou, e.pd, e.fa * 1e6, best.join(";")));
        md.push_str(&format!(
            "| {:>2} | {:>3} | {:>3} | {:.4}{} | {:.4}{} | {:>9.3}{} |\n",
            p.d,
            p.alpha,
            p.beta,
            e.iou,
            star(flags[0].0),
            e.pd,
            star(flags[1].0),
            e.fa * 1e6,
            star(flags[2].0)
        ));
    }
    (csv, md)
}

fn sweep(data_dir: &Path, out: &Path, o: &SweepOpts, w: &mut dyn Write) -> CliResult {
    let ds = grid_axis(&o.dilation, vec![1, 2, 3, 4], "dilation")?;
    let alphas = grid_axis(&o.alpha, vec![1.0, 1.5, 2.0], "alpha")?;
    let betas = grid_axis(&o.beta, vec![0.5, 1.0], "beta")?;
    let mut grid = Vec::new();
    for &d in &ds {
        for &alpha in &alphas {
            for &beta in &betas {
                grid.push(LcaParams::new(alpha, beta, d).map_err(|e| CliError::Usage(e.to_string()))?);
            }
        }
    }
    let setup = sweep_setup(data_dir, o)?;
    create_dir(out)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (i, params) in grid.iter().enumerate() {
        let model = ModelConfig { lca: *params, ..setup.model.clone() };
        let report = train_and_evaluate(model, &setup.train, setup.seed, &setup.splits)?;
        writeln!(w, "[{}/{}] d={} alpha={} beta={}: iou {:.4}", i + 1, grid.len(), params.d, params.alpha, params.beta, report.iou)?;
        rows.push(SweepRow { params: *params, report });
    }
    let (csv, md) = sweep_table(&rows);
    write_file(&out.join("sweep.csv"), &csv)?;
    write_file(&out.join("sweep.md"), &md)?;
    w.write_all(md.as_bytes())?;
    Ok(())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn ablation_cmd(data_dir: &Path, out: &Path, o: &SweepOpts, seeds: u64, w: &mut dyn Write) -> CliResult {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let setup = sweep_setup(data_dir, o)?;
    create_dir(out)?;
    let mut csv = String::from("seed,lce,iou,pd,fa_e6\n");
    let mut deltas = Vec::new();
    for k in 0..seeds {
        let seed = setup.seed + k;
        let mut ious = [0.0; 2];
        for (slot, use_lce) in [(0, true), (1, false)] {
            let model = ModelConfig { use_lce, ..setup.model.clone() };
            let e = train_and_evaluate(model, &setup.train, seed, &setup.splits)?;
            csv.push_str(&format!("{seed},{},{:.6},{:.6},{:.4}\n", if use_lce { "on" } else { "off" }, e.iou, e.pd, e.fa * 1e6));
            writeln!(w, "seed {seed} lce {}: iou {:.4} pd {:.4}", if use_lce { "on" } else { "off" }, e.iou, e.pd)?;
            ious[slot] = e.iou;
        }
        deltas.push(ious[0] - ious[1]);
    }
    let summary = format!("median IoU delta (LCE on - off) over {seeds} seeds: {:+.4}\n", median(&mut deltas));
    write_file(&out.join("ablation.csv"), &csv)?;
    write_file(&out.join("ablation.txt"), &summary)?;
    w.write_all(summary.as_bytes())?;
    Ok(())
}

fn bench(common: &CommonFlags, flags: &LcaFlags, size: usize, seconds: f64, w: &mut dyn Write) -> CliResult {
    if !(seconds >= 0.0 && seconds.is_finite()) {
        return Err(CliError::Usage(format!("--seconds {seconds} must be a non-negative number")));
    }
    let cfg = FileConfig::load(common.config.as_deref())?;
    let mut model = cfg.model.clone();
    apply_lca(&mut model.lca, flags)?;
    if let Some(c) = common.base_channels {
        model.base_channels = c;
    }
    model.input_size = [size, size];
    model.validate()?;
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    let net = LcaeNet::new(model.clone(), seed)?;
    let params = net.num_params();
    let flops = count_flops(&model, size, size);
    writeln!(w, "params: {params}")?;
    writeln!(w, "flops: {flops} ({:.3} G)", flops as f64 / 1e9)?;

    let net = net.cast::<f32>();
    let image = Array4::from_shape_fn((1, 1, size, size), |(_, _, r, c)| ((r * 31 + c * 17) % 23) as f64 / 11.0 - 1.0);
    let start = Instant::now();
    let mut n = 0usize;
    while n == 0 || start.elapsed().as_secs_f64() < seconds {
        net.predict_batch(&image, None)?;
        n += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    writeln!(w, "throughput: {:.2} images/s ({n} images in {elapsed:.2} s)", n as f64 / elapsed)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestones_follow_the_budget() {
        let mut tc = TrainConfig::default();
        fit_epochs(&mut tc, 50);
        assert_eq!((tc.epochs, tc.milestones.clone()), (50, vec![25, 37]));
        fit_epochs(&mut tc, 2);
        assert_eq!(tc.milestones, vec![1]);
        fit_epochs(&mut tc, 1);
        assert!(tc.milestones.is_empty());
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize_weight(0.5), 128);
        assert_eq!(quantize_weight(0.0), 0);
        assert_eq!(quantize_weight(1.0), 255);
        assert_eq!(quantize_weight(0.499), 127);
    }

    #[test]
    fn raw_format_round_trips_exactly() {
        let a = Array2::from_shape_fn((3, 4), |(r, c)| 1.0 / (1.0 + (r as f64 * 0.37 - c as f64).exp()));
        assert_eq!(parse_raw(&format_raw(&a)).unwrap(), a);
        assert!(parse_raw("2 2\n0.1 0.2 0.3").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn input_size_rounds_up_to_multiple_of_eight() {
        let img = lcae_core::lca::GrayImage::filled(60, 50, 1.0).unwrap();
        let s = Sample::new(img, lcae_core::model::BinaryMask::zeros(60, 50), "x").unwrap();
        assert_eq!(infer_input_size(&[s]), Some(64));
    }
}
