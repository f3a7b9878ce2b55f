use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use slr_core::acquisition::{rectangle_phantom, synth_dataset, Acquisition, Dataset, MultiChannelKSpace};
use slr_core::analysis::{
    annihilation_probe, edge_flat_means, edge_pixels, edge_pixels_from_image, emit_image, write_pgm, CircularBank,
    CnnProbe, ImageKind, MetricReport, MetricRow, ProbeConfig, ProbeOperator, ProbeResult,
};
use slr_core::io::{load_tensor, save_tensor};
use slr_core::lifting::{calibrated_nullspace, Weighting};
use slr_core::slr::{calibrated_solve, irls_solve, split_solve, write_trace_csv, QSource, ReconResult};
use slr_core::tensor::{ComplexTensor, C64};
use slr_core::unrolled::train::{fit_input_scale, EpochRecord};
use slr_core::unrolled::{load_checkpoint, train, unrolled_forward, xavier_init, CnnSpec, UnrolledModel};
use slr_core::{Error, Result, Rng};

use crate::config::{CnnConfig, ExperimentConfig, MetricsSource, Pipeline, ProbeOperatorKind, QSourceKind};

/// Runs `pipeline` and returns the one-line summary.
pub fn run(cfg: &ExperimentConfig, pipeline: Pipeline) -> Result<String> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved_config.json"), serde_json::to_vec_pretty(cfg)?)?;
    match pipeline {
        Pipeline::Synth => synth(cfg),
        Pipeline::Irls | Pipeline::Calib | Pipeline::Split => solve(cfg, pipeline),
        Pipeline::Train => run_train(cfg),
        Pipeline::Recon => recon(cfg),
        Pipeline::Probe => probe(cfg),
        Pipeline::Metrics => metrics(cfg),
    }
}

fn synth(cfg: &ExperimentConfig) -> Result<String> {
    let m = synth_dataset(cfg.seed, &cfg.dataset, &cfg.output_dir)?;
    Ok(format!(
        "synth: {} examples ({}x{}, {} coils, R={}) -> {}",
        m.examples.len(),
        m.shape[0],
        m.shape[1],
        m.channels,
        m.acceleration,
        cfg.output_dir.join("manifest.json").display()
    ))
}

fn open_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.data.manifest.as_ref().ok_or_else(|| Error::InvalidArgument("data.manifest is required".into()))?;
    Dataset::open(path)
}

fn load_split(ds: &Dataset, name: &str, limit: Option<usize>) -> Result<Vec<(String, Acquisition)>> {
    let entries = ds.split(name);
    let n = limit.map_or(entries.len(), |l| l.min(entries.len()));
    entries[..n].iter().map(|e| Ok((e.id.clone(), ds.load(e)?))).collect()
}

fn nonempty(examples: Vec<(String, Acquisition)>, split: &str) -> Result<Vec<(String, Acquisition)>> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` has no examples")));
    }
    Ok(examples)
}

#[derive(Serialize)]
struct TimingRow<'a> {
    id: &'a str,
    seconds: f64,
}

/// Per-example artifacts shared by every reconstruction pipeline.
struct ReconWriter<'a> {
    cfg: &'a ExperimentConfig,
    report: MetricReport,
    timing: Vec<(String, f64)>,
}

impl<'a> ReconWriter<'a> {
    fn new(cfg: &'a ExperimentConfig, label: &str) -> Self {
        Self {
            cfg,
            report: MetricReport::new(label),
            timing: Vec::new(),
        }
    }

    fn push(&mut self, id: &str, truth: &ComplexTensor, image: &ComplexTensor, seconds: f64) -> Result<()> {
        let out = &self.cfg.output_dir;
        save_tensor(out.join(format!("{id}_recon.cten")), image)?;
        if self.cfg.output.images {
            emit_image(&out.join(format!("{id}_recon.pgm")), image, ImageKind::Magnitude, None)?;
            emit_image(&out.join(format!("{id}_error.pgm")), image, ImageKind::ErrorMap, Some(truth))?;
        }
        self.report.push(MetricRow::compute(id, truth, image)?);
        self.timing.push((id.to_string(), seconds));
        Ok(())
    }

    fn finish(self) -> Result<String> {
        let out = &self.cfg.output_dir;
        self.report.write_csv(&out.join("metrics.csv"))?;
        let mut w = csv::Writer::from_path(out.join("timing.csv")).map_err(csv_io)?;
        for (id, seconds) in &self.timing {
            w.serialize(TimingRow { id, seconds: *seconds }).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(self.report.summary())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn solve(cfg: &ExperimentConfig, pipeline: Pipeline) -> Result<String> {
    let ds = open_dataset(cfg)?;
    let examples = nonempty(load_split(&ds, &cfg.data.split, cfg.data.limit)?, &cfg.data.split)?;
    let mut writer = ReconWriter::new(cfg, pipeline.name());
    for (id, acq) in &examples {
        let start = Instant::now();
        let res = solve_one(cfg, pipeline, &acq.measured)?;
        let seconds = start.elapsed().as_secs_f64();
        write_trace_csv(cfg.output_dir.join(format!("{id}_trace.csv")), &res.trace)?;
        writer.push(id, &acq.truth, &res.image, seconds)?;
    }
    writer.finish()
}

fn solve_one(cfg: &ExperimentConfig, pipeline: Pipeline, b: &MultiChannelKSpace) -> Result<ReconResult> {
    let grid = b.data.grid()?;
    match pipeline {
        Pipeline::Irls => irls_solve(b, &cfg.irls),
        Pipeline::Calib => {
            let c = &cfg.calib;
            let spec = c.lifting.spec(grid, b.channels())?;
            let basis = calibrated_nullspace(b, &spec, c.rank_tol)?;
            calibrated_solve(b, &basis, c.lambda, &spec, &c.cg)
        }
        Pipeline::Split => {
            let s = &cfg.split;
            let q = match s.q_source {
                QSourceKind::Recompute => QSource::Recompute,
                QSourceKind::Calibrated => {
                    let spec = s.solver.lifting.spec(grid, b.channels())?;
                    QSource::Fixed(calibrated_nullspace(b, &spec, s.rank_tol)?)
                }
            };
            split_solve(b, &s.solver, &q)
        }
        _ => unreachable!("not a solver pipeline"),
    }
}

fn cnn_spec(c: CnnConfig, channels: usize) -> CnnSpec {
    CnnSpec {
        layers: c.layers,
        filters: c.filters,
        kernel: c.kernel,
        channels,
    }
}

fn kspace_channels(weighting: Weighting, coils: usize) -> usize {
    match weighting {
        Weighting::Identity => 2 * coils,
        Weighting::Gradient => 4 * coils,
    }
}

/// Fresh model from the config; `nk` and `ni` draw from separate streams.
fn fresh_model(cfg: &ExperimentConfig, coils: usize, input_scale: f64) -> Result<UnrolledModel> {
    let m = &cfg.model;
    let weighting = m.weighting.unwrap_or(Weighting::Identity);
    let nk = xavier_init(
        &mut Rng::derived(cfg.seed, 0),
        cnn_spec(m.cnn.unwrap_or_default(), kspace_channels(weighting, coils)),
    );
    let ni = m
        .image_cnn
        .map(|c| xavier_init(&mut Rng::derived(cfg.seed, 1), cnn_spec(c, 2 * coils)));
    let model = UnrolledModel {
        lambda2: m.lambda2.unwrap_or(if ni.is_some() { 1.0 } else { 0.0 }),
        nk,
        ni,
        iterations: m.k.unwrap_or(3),
        lambda1: m.lambda1.unwrap_or(1.0),
        weighting,
        input_scale,
    };
    check_model(&model)?;
    Ok(model)
}

fn check_model(model: &UnrolledModel) -> Result<()> {
    let errs = model.validate();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(errs.join("; ")))
    }
}

fn run_train(cfg: &ExperimentConfig) -> Result<String> {
    let ds = open_dataset(cfg)?;
    let tr = nonempty(load_split(&ds, &cfg.data.train_split, cfg.data.limit)?, &cfg.data.train_split)?;
    let va = load_split(&ds, &cfg.data.val_split, cfg.data.limit)?;
    let tr: Vec<Acquisition> = tr.into_iter().map(|(_, a)| a).collect();
    let va: Vec<Acquisition> = va.into_iter().map(|(_, a)| a).collect();
    let weighting = cfg.model.weighting.unwrap_or(Weighting::Identity);
    let scale = fit_input_scale(&tr, weighting)?;
    let model = fresh_model(cfg, tr[0].measured.channels(), scale)?;
    let params = model.param_count();
    let mut tc = cfg.train.clone();
    tc.checkpoint = Some(cfg.output_dir.join("checkpoint"));
    let outcome = train(model, &tr, &va, &tc, |_| {})?;
    write_history(&cfg.output_dir.join("history.csv"), &outcome.history)?;
    let last = outcome.history.last().expect("at least one epoch");
    Ok(format!(
        "train: {} params, {} epochs, train loss {:.4e}{} -> {}",
        params,
        outcome.history.len(),
        last.train_loss,
        last.val_loss.map(|v| format!(", val loss {v:.4e}")).unwrap_or_default(),
        cfg.output_dir.join("checkpoint").display()
    ))
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    for r in history {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn recon_model(cfg: &ExperimentConfig, coils: usize) -> Result<UnrolledModel> {
    let m = &cfg.model;
    let mut model = match &m.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None if m.k == Some(0) => fresh_model(cfg, coils, 1.0)?,
        None => return Err(Error::InvalidArgument("recon needs model.checkpoint unless model.K = 0".into())),
    };
    if let Some(k) = m.k {
        model.iterations = k;
    }
    if let Some(l) = m.lambda1 {
        model.lambda1 = l;
    }
    if let Some(l) = m.lambda2 {
        model.lambda2 = l;
    }
    check_model(&model)?;
    Ok(model)
}

fn recon(cfg: &ExperimentConfig) -> Result<String> {
    let ds = open_dataset(cfg)?;
    let examples = nonempty(load_split(&ds, &cfg.data.split, cfg.data.limit)?, &cfg.data.split)?;
    let model = recon_model(cfg, examples[0].1.measured.channels())?;
    let label = if model.iterations == 0 {
        "zero-filled"
    } else if model.is_hybrid() {
        "h-dslr"
    } else {
        "k-dslr"
    };
    let mut writer = ReconWriter::new(cfg, label);
    for (id, acq) in &examples {
        let start = Instant::now();
        let image = unrolled_forward(&acq.measured, &model)?;
        let seconds = start.elapsed().as_secs_f64();
        writer.push(id, &acq.truth, &image, seconds)?;
    }
    writer.finish()
}

fn metrics(cfg: &ExperimentConfig) -> Result<String> {
    let ds = open_dataset(cfg)?;
    let examples = nonempty(load_split(&ds, &cfg.data.split, cfg.data.limit)?, &cfg.data.split)?;
    let mut report = MetricReport::new(cfg.metrics.label.clone());
    for (id, acq) in &examples {
        let rec = match cfg.metrics.source {
            MetricsSource::ZeroFilled => acq.zero_filled()?,
            MetricsSource::Files => {
                let dir: &PathBuf = cfg.metrics.reconstructions.as_ref().expect("validated");
                load_tensor(dir.join(format!("{id}_recon.cten")))?
            }
        };
        report.push(MetricRow::compute(id.as_str(), &acq.truth, &rec)?);
    }
    report.write_csv(&cfg.output_dir.join("metrics.csv"))?;
    Ok(report.summary())
}

#[derive(Serialize)]
struct ProbeSummary {
    operator: ProbeOperatorKind,
    realizations: usize,
    sigma: f64,
    edge_mean: f64,
    flat_mean: f64,
    reference_error: Option<f64>,
}

fn real_plane(values: &[f64], grid: (usize, usize)) -> Result<ComplexTensor> {
    ComplexTensor::from_real(&[1, grid.0, grid.1], values)
}

fn probe(cfg: &ExperimentConfig) -> Result<String> {
    let p = &cfg.probe;
    let pc = ProbeConfig {
        sigma: p.sigma,
        realizations: p.realizations,
        subtract_reference: p.subtract_reference,
        injection: p.injection,
        seed: cfg.seed,
    };
    let (result, edges): (ProbeResult, Vec<bool>) = match p.operator {
        ProbeOperatorKind::Model => {
            let ds = open_dataset(cfg)?;
            let examples = load_split(&ds, &cfg.data.split, None)?;
            let (_, acq) = examples.get(p.example).ok_or_else(|| {
                Error::InvalidArgument(format!("probe.example {} is outside split `{}`", p.example, cfg.data.split))
            })?;
            let path = cfg.model.checkpoint.as_ref().expect("validated");
            let model = load_checkpoint(path)?;
            let op = CnnProbe::from_model(&model);
            let res = annihilation_probe(&op, &acq.truth, model.weighting, &pc)?;
            (res, edge_pixels_from_image(&acq.truth, p.edge_tol)?)
        }
        ProbeOperatorKind::Annihilator => {
            let grid = (p.shape[0], p.shape[1]);
            let (phantom, cuts) = rectangle_phantom(&mut Rng::derived(cfg.seed, 0), grid)?;
            let bank = annihilator_bank(&cuts.annihilator())?;
            let gamma = phantom.image.clone().reshape(&[1, grid.0, grid.1])?;
            let mut res = annihilation_probe(&bank as &dyn ProbeOperator, &gamma, Weighting::Gradient, &pc)?;
            res.reference = Some(bank.analytic_sos(grid, p.sigma));
            (res, edge_pixels(&phantom.labels, grid))
        }
    };
    let out = &cfg.output_dir;
    let grid = result.grid;
    save_tensor(out.join("sos.cten"), &real_plane(&result.sos, grid)?)?;
    save_tensor(out.join("sos_normalized.cten"), &real_plane(&result.normalized(), grid)?)?;
    write_pgm(&out.join("sos.pgm"), &result.sos, grid)?;
    if let Some(r) = &result.reference {
        save_tensor(out.join("reference_sos.cten"), &real_plane(r, grid)?)?;
    }
    let (edge_mean, flat_mean) = edge_flat_means(&result.sos, &edges);
    let summary = ProbeSummary {
        operator: p.operator,
        realizations: result.realizations,
        sigma: result.sigma,
        edge_mean,
        flat_mean,
        reference_error: result.reference_error(),
    };
    fs::write(out.join("probe.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(format!(
        "probe: R={} edge mean {:.4e}, flat mean {:.4e}{}",
        result.realizations,
        edge_mean,
        flat_mean,
        summary.reference_error.map(|e| format!(", L2 vs analytic {e:.3}")).unwrap_or_default()
    ))
}

/// Two-band bank applying the same annihilating filter to each gradient band.
pub fn annihilator_bank(taps: &[Vec<C64>]) -> Result<CircularBank> {
    let window = (taps.len(), taps.first().map_or(0, Vec::len));
    let flat: Vec<C64> = taps.iter().flatten().copied().collect();
    let zeros = vec![C64::new(0.0, 0.0); flat.len()];
    let f0 = [flat.clone(), zeros.clone()].concat();
    let f1 = [zeros, flat].concat();
    CircularBank::new(2, window, vec![f0, f1])
}
