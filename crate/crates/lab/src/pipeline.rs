//! Pipeline stages and the subcommands and experiments built from them.
//!
//! Stages return plain results so tests can drive them in-process; the
//! `write_*` functions turn results into artifacts. Datasets and trained
//! networks are cached under `<output_dir>/cache` keyed by the settings
//! that determine them.

use std::path::{Path, PathBuf};

use serde_json::json;
use tmle_lens_core::causal::{self, TmleResult};
use tmle_lens_core::decomp::{self, SparseCoder};
use tmle_lens_core::dgp::{self, Dataset, Family, ScalerParams};
use tmle_lens_core::intervene::{ablation_study, AblationScheme, AblationStudy};
use tmle_lens_core::nnet::{self, EpochLosses, MultiTaskNet};
use tmle_lens_core::probes::{self, ImportanceCurve, ProbeReport};
use tmle_lens_core::synthgen::{self, BaseNets, SweepReport};
use tmle_lens_core::trace::{self, PathwayGraph, PathwayMetrics};
use tmle_lens_core::{rng, stats, Matrix};

use crate::artifacts::{cell, opt_cell, Artifacts, Table};
use crate::config::RunConfig;
use crate::error::{LabError, LabResult, StageContext};
use crate::formats::{self, ActivationDump, Checkpoint, Fingerprint};
use crate::svg::{self, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Dgp,
    Train,
    Tmle,
    Probe,
    Ablate,
    Trace,
    Sae,
    Synthgen,
    Exp1,
    Exp2,
    Exp3,
}

impl Command {
    pub const ALL: [Command; 11] = [
        Command::Dgp,
        Command::Train,
        Command::Tmle,
        Command::Probe,
        Command::Ablate,
        Command::Trace,
        Command::Sae,
        Command::Synthgen,
        Command::Exp1,
        Command::Exp2,
        Command::Exp3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Dgp => "dgp",
            Command::Train => "train",
            Command::Tmle => "tmle",
            Command::Probe => "probe",
            Command::Ablate => "ablate",
            Command::Trace => "trace",
            Command::Sae => "sae",
            Command::Synthgen => "synthgen",
            Command::Exp1 => "exp1",
            Command::Exp2 => "exp2",
            Command::Exp3 => "exp3",
        }
    }
}

/// Runs one subcommand into `<output_dir>/<name>/` and returns the files written.
pub fn run(command: Command, cfg: &RunConfig) -> LabResult<Vec<PathBuf>> {
    let cfg = match command {
        Command::Exp1 | Command::Exp3 => cfg.with_family(Family::Ds1),
        Command::Exp2 => cfg.with_family(Family::Ds2),
        _ => cfg.clone(),
    };
    cfg.validate()?;
    let cache = cfg.output_dir.join("cache");
    let mut art = Artifacts::create(&cfg.output_dir.join(command.name()), &cfg)?;
    let cache = Some(cache.as_path());
    match command {
        Command::Dgp => {
            let prepared = prepare(&cfg, cache)?;
            write_dgp(&mut art, &prepared)?;
        }
        Command::Train => {
            let model = fit(&cfg, cache)?;
            write_training(&mut art, &model)?;
            let fp = formats::fingerprint_of(&art.fingerprint);
            art.write("model.bin", &formats::encode_checkpoint(&model.checkpoint(), &fp))?;
        }
        Command::Tmle => {
            let model = fit(&cfg, cache)?;
            let res = run_tmle(&cfg, &model)?;
            write_tmle(&mut art, &model, &res, true)?;
        }
        Command::Probe => {
            let model = fit(&cfg, cache)?;
            let probes = run_probes(&cfg, &model)?;
            write_probes(&mut art, &probes)?;
        }
        Command::Ablate => {
            let model = fit(&cfg, cache)?;
            let probes = run_probes(&cfg, &model)?;
            let ablation = run_ablation(&cfg, &model, &probes.reports)?;
            write_ablation(&mut art, &ablation)?;
        }
        Command::Trace => {
            let model = fit(&cfg, cache)?;
            let traces = run_traces(&cfg, &model)?;
            write_traces(&mut art, &traces, false)?;
        }
        Command::Sae => {
            let model = fit(&cfg, cache)?;
            let sae = run_sae(&cfg, &model)?;
            write_sae(&mut art, &cfg, &model, &sae)?;
        }
        Command::Synthgen => {
            let model = fit(&cfg, cache)?;
            let sweeps = run_synthgen(&cfg, &model)?;
            write_synthgen(&mut art, &cfg, &model, &sweeps)?;
        }
        Command::Exp1 => exp1(&mut art, &cfg, cache)?,
        Command::Exp2 => exp2(&mut art, &cfg, cache)?,
        Command::Exp3 => exp3(&mut art, &cfg, cache)?,
    }
    Ok(art.written)
}

// ---------------------------------------------------------------- data

/// A generated dataset on its original scale and as the network sees it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub raw: Dataset,
    /// Same rows with standardized covariates.
    pub data: Dataset,
    pub scaler: ScalerParams,
    pub fingerprint: Fingerprint,
}

fn dataset_key(cfg: &RunConfig) -> String {
    format!(
        "dataset format={} spec={:?} seed={}",
        formats::FORMAT_VERSION,
        cfg.dgp_spec(),
        cfg.dgp_seed()
    )
}

fn cache_file(dir: &Path, kind: &str, fp: &Fingerprint) -> PathBuf {
    dir.join(format!("{kind}-{}.bin", &hex::encode(fp)[..16]))
}

/// Generates (or loads from `cache`) the configured dataset and standardizes it.
pub fn prepare(cfg: &RunConfig, cache: Option<&Path>) -> LabResult<Prepared> {
    let fp = formats::fingerprint_of(&dataset_key(cfg));
    let path = cache.map(|d| cache_file(d, "dataset", &fp));
    let cached = path
        .as_deref()
        .and_then(|p| formats::read_cached(p, |b| formats::decode_dataset(b, Some(&fp))));
    let raw = match cached {
        Some(ds) => ds,
        None => {
            let ds = dgp::generate(&cfg.dgp_spec(), cfg.dgp_seed()).stage("dgp")?;
            if let Some(p) = &path {
                formats::write_bytes(p, &formats::encode_dataset(&ds, &fp))?;
            }
            ds
        }
    };
    let (z, scaler) = dgp::standardize(&raw.w).stage("dgp")?;
    let data = Dataset { w: z, ..raw.clone() };
    Ok(Prepared {
        raw,
        data,
        scaler,
        fingerprint: fp,
    })
}

pub fn write_dgp(art: &mut Artifacts, p: &Prepared) -> LabResult<()> {
    let comments = vec![
        art.header_line(),
        format!("seed={} true_ate={}", p.raw.seed, opt_cell(p.raw.true_ate)),
    ];
    art.write("dataset.csv", formats::dataset_csv(&p.raw, &comments).as_bytes())?;
    let fp = formats::fingerprint_of(&art.fingerprint);
    art.write("dataset.bin", &formats::encode_dataset(&p.raw, &fp))?;
    let treated = stats::mean(&p.raw.a);
    art.json(
        "dgp.json",
        json!({
            "n": p.raw.n(),
            "dim": p.raw.dim(),
            "seed": p.raw.seed,
            "treated_share": treated,
            "true_ate": p.raw.true_ate,
            "naive_difference": causal::naive_diff(&p.raw).ok(),
            "covariate_mean": p.scaler.mean,
            "covariate_sd": p.scaler.sd,
        }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- model

#[derive(Clone, Debug)]
pub struct Model {
    pub prepared: Prepared,
    pub net: MultiTaskNet,
    pub history: Vec<EpochLosses>,
    pub fingerprint: Fingerprint,
}

impl Model {
    pub fn data(&self) -> &Dataset {
        &self.prepared.data
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            scaler: self.prepared.scaler.clone(),
            history: self.history.clone(),
        }
    }

    /// Rows the network was trained on.
    pub fn train_rows(&self, cfg: &RunConfig) -> Vec<usize> {
        let t = cfg.train_config();
        rng::train_test_split(self.data().n(), t.test_fraction, t.seed).0
    }
}

/// Trains (or loads from `cache`) the network on the prepared dataset.
pub fn fit(cfg: &RunConfig, cache: Option<&Path>) -> LabResult<Model> {
    let prepared = prepare(cfg, cache)?;
    let net_cfg = cfg.net_config();
    let train_cfg = cfg.train_config();
    let key = format!(
        "model format={} data={} net={net_cfg:?} train={train_cfg:?}",
        formats::FORMAT_VERSION,
        hex::encode(prepared.fingerprint)
    );
    let fp = formats::fingerprint_of(&key);
    let path = cache.map(|d| cache_file(d, "model", &fp));
    let cached = path
        .as_deref()
        .and_then(|p| formats::read_cached(p, |b| formats::decode_checkpoint(b, Some(&fp))));
    let (net, history) = match cached {
        Some(ck) => (ck.net, ck.history),
        None => {
            let init = MultiTaskNet::init(&net_cfg).stage("net")?;
            let (net, report) = nnet::train(&init, &prepared.data, &train_cfg).stage("train")?;
            let model = (net, report.history);
            if let Some(p) = &path {
                let ck = Checkpoint {
                    net: model.0.clone(),
                    scaler: prepared.scaler.clone(),
                    history: model.1.clone(),
                };
                formats::write_bytes(p, &formats::encode_checkpoint(&ck, &fp))?;
            }
            model
        }
    };
    Ok(Model {
        prepared,
        net,
        history,
        fingerprint: fp,
    })
}

pub fn write_training(art: &mut Artifacts, model: &Model) -> LabResult<()> {
    let mut t = Table::new(&["epoch", "train_total", "val_total", "val_mse", "val_bce"]);
    for h in &model.history {
        t.row(vec![
            cell(h.epoch),
            cell(h.train_total),
            cell(h.val_total),
            cell(h.val_mse),
            cell(h.val_bce),
        ]);
    }
    art.csv("losses.csv", &t)?;
    let series = |label: &str, f: fn(&EpochLosses) -> f64| Series {
        label: label.into(),
        points: model.history.iter().map(|h| (h.epoch as f64, f(h))).collect(),
    };
    let chart = svg::line_chart(
        "Training losses",
        "epoch",
        "loss",
        &[
            series("train total", |h| h.train_total),
            series("val total", |h| h.val_total),
            series("val mse", |h| h.val_mse),
            series("val bce", |h| h.val_bce),
        ],
        None,
        &art.header_line(),
    );
    art.svg("losses.svg", &chart)?;
    Ok(())
}

// ---------------------------------------------------------------- tmle

pub fn run_tmle(cfg: &RunConfig, model: &Model) -> LabResult<TmleResult> {
    causal::tmle_ate(model.data(), &model.net, &model.net, cfg.tmle.truncation).stage("tmle")
}

fn tmle_json(res: &TmleResult, truth: Option<f64>) -> serde_json::Value {
    json!({
        "psi": res.psi,
        "epsilon": res.epsilon,
        "se": res.se,
        "ci95": [res.ci95.0, res.ci95.1],
        "mean_eic": stats::mean(&res.eic),
        "comparators": {
            "gcomp": res.comparators.gcomp,
            "ipw": res.comparators.ipw,
            "naive": res.comparators.naive,
        },
        "true_ate": truth,
        "covers_true_ate": truth.map(|t| res.covers(t)),
    })
}

pub fn write_tmle(art: &mut Artifacts, model: &Model, res: &TmleResult, with_eic: bool) -> LabResult<()> {
    art.json("tmle.json", tmle_json(res, model.data().true_ate))?;
    if with_eic {
        let mut t = Table::new(&["row", "eic"]);
        for (i, d) in res.eic.iter().enumerate() {
            t.row(vec![cell(i), cell(d)]);
        }
        art.csv("eic.csv", &t)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- probes

#[derive(Clone, Debug)]
pub struct ProbeStudy {
    pub target: usize,
    pub reports: Vec<ProbeReport>,
    pub curves: Vec<ImportanceCurve>,
}

impl ProbeStudy {
    /// Spearman correlation between layer index and held-out R².
    pub fn depth_trend(&self) -> f64 {
        let layers: Vec<f64> = self.reports.iter().map(|r| r.layer as f64).collect();
        let r2: Vec<f64> = self.reports.iter().map(|r| r.r2).collect();
        stats::spearman(&layers, &r2)
    }
}

pub fn run_probes(cfg: &RunConfig, model: &Model) -> LabResult<ProbeStudy> {
    let seed = cfg.stage_seed(cfg.probe.seed, "probe");
    let target = cfg.probe.target;
    let reports = probes::probe_all_layers(&model.net, &model.data().w, target, seed).stage("probe")?;
    let curves = reports
        .iter()
        .map(probes::importance_curve)
        .collect::<tmle_lens_core::Result<Vec<_>>>()
        .stage("probe")?;
    Ok(ProbeStudy {
        target,
        reports,
        curves,
    })
}

pub fn write_probes(art: &mut Artifacts, study: &ProbeStudy) -> LabResult<()> {
    let mut t = Table::new(&["layer", "r2", "count50", "count75", "count95", "ridge"]);
    for (r, c) in study.reports.iter().zip(&study.curves) {
        let count = |th: f64| c.count(th).map(cell).unwrap_or_default();
        t.row(vec![
            cell(r.layer + 1),
            cell(r.r2),
            count(0.5),
            count(0.75),
            count(0.95),
            cell(r.ridge),
        ]);
    }
    art.csv("probes.csv", &t)?;

    let width = study.reports.first().map_or(0, |r| r.coefficients.len());
    let mut header = vec!["layer".to_string(), "intercept".to_string()];
    header.extend((1..=width).map(|j| format!("n{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut coef = Table::new(&header);
    for r in &study.reports {
        let mut row = vec![cell(r.layer + 1), cell(r.intercept)];
        row.extend(r.coefficients.iter().map(cell));
        coef.row(row);
    }
    art.csv("probe_coefficients.csv", &coef)?;

    let mut imp = Table::new(&["layer", "rank", "neuron", "importance", "cumulative"]);
    for (r, c) in study.reports.iter().zip(&study.curves) {
        for (rank, (&j, share)) in r.ranking.iter().zip(&c.cumulative).enumerate() {
            imp.row(vec![
                cell(r.layer + 1),
                cell(rank + 1),
                cell(j),
                cell(r.importance[j]),
                cell(share),
            ]);
        }
    }
    art.csv("importance.csv", &imp)?;

    let note = art.header_line();
    let r2 = Series {
        label: format!("W{}", study.target + 1),
        points: study.reports.iter().map(|r| ((r.layer + 1) as f64, r.r2)).collect(),
    };
    art.svg(
        "probe_r2.svg",
        &svg::line_chart("Held-out probe R² by layer", "layer", "R²", &[r2], None, &note),
    )?;
    let curves: Vec<Series> = study
        .reports
        .iter()
        .zip(&study.curves)
        .map(|(r, c)| Series {
            label: format!("layer {}", r.layer + 1),
            points: c
                .cumulative
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) as f64, v))
                .collect(),
        })
        .collect();
    art.svg(
        "importance_curves.svg",
        &svg::line_chart(
            "Cumulative importance",
            "neurons (by rank)",
            "share",
            &curves,
            None,
            &note,
        ),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- ablation

#[derive(Clone, Debug)]
pub struct AblationRun {
    /// Top, bottom and random schemes.
    pub main: AblationStudy,
    /// One study per configured band width.
    pub bands: Vec<(f64, AblationStudy)>,
}

impl AblationRun {
    /// Mean `|ΔATE|` per scheme over the `deepest` last trunk layers, in
    /// scheme order.
    pub fn deep_effects(&self, deepest: usize) -> Vec<(AblationScheme, f64)> {
        let layers: Vec<usize> = {
            let mut l: Vec<usize> = self.main.records.iter().map(|r| r.layer).collect();
            l.sort_unstable();
            l.dedup();
            l.into_iter().rev().take(deepest).collect()
        };
        let mut out: Vec<(AblationScheme, f64, usize)> = Vec::new();
        for r in self.main.records.iter().filter(|r| layers.contains(&r.layer)) {
            let d = r.outcome.delta_ate.abs();
            match out.iter_mut().find(|(s, _, _)| *s == r.scheme) {
                Some(e) => {
                    e.1 += d;
                    e.2 += 1;
                }
                None => out.push((r.scheme, d, 1)),
            }
        }
        out.into_iter().map(|(s, sum, c)| (s, sum / c as f64)).collect()
    }
}

pub fn run_ablation(cfg: &RunConfig, model: &Model, reports: &[ProbeReport]) -> LabResult<AblationRun> {
    let trunc = cfg.tmle.truncation;
    let main = ablation_study(&model.net, model.data(), reports, &cfg.ablation_schemes(), trunc).stage("ablate")?;
    let mut bands = Vec::new();
    for &w in &cfg.ablate.band_widths {
        let schemes = AblationScheme::bands(w).stage("ablate")?;
        let study = ablation_study(&model.net, model.data(), reports, &schemes, trunc).stage("ablate")?;
        bands.push((w, study));
    }
    Ok(AblationRun { main, bands })
}

fn ablation_table(study: &AblationStudy) -> Table {
    let mut t = Table::new(&[
        "layer",
        "scheme",
        "band_lo",
        "band_hi",
        "delta_mse_q",
        "delta_bce_g",
        "ate",
        "ci_low",
        "ci_high",
        "delta_ate",
        "neurons",
    ]);
    let b = &study.baseline;
    t.row(vec![
        String::new(),
        "baseline".into(),
        String::new(),
        String::new(),
        cell(0.0),
        cell(0.0),
        cell(b.psi),
        cell(b.ci95.0),
        cell(b.ci95.1),
        cell(0.0),
        cell(0),
    ]);
    for r in &study.records {
        let (lo, hi) = r
            .scheme
            .band()
            .map_or((String::new(), String::new()), |(l, h)| (cell(l), cell(h)));
        let o = &r.outcome;
        t.row(vec![
            cell(r.layer + 1),
            r.scheme.name(),
            lo,
            hi,
            cell(o.delta_mse_q),
            cell(o.delta_bce_g),
            cell(o.tmle.psi),
            cell(o.tmle.ci95.0),
            cell(o.tmle.ci95.1),
            cell(o.delta_ate),
            cell(r.neurons.len()),
        ]);
    }
    t
}

fn width_tag(w: f64) -> String {
    format!("{:02}", (w * 100.0).round() as i64)
}

pub fn write_ablation(art: &mut Artifacts, run: &AblationRun) -> LabResult<()> {
    art.csv("ablation.csv", &ablation_table(&run.main))?;
    let note = art.header_line();
    let mut bars: Vec<(String, f64)> = Vec::new();
    let mut random = Vec::new();
    for (s, v) in run.deep_effects(3) {
        match s {
            AblationScheme::Random { .. } => random.push(v),
            _ => bars.push((s.name(), v)),
        }
    }
    if !random.is_empty() {
        bars.push(("random (mean)".into(), stats::mean(&random)));
    }
    art.svg(
        "ablation_deep.svg",
        &svg::bar_chart("Mean |ΔATE| over the three deepest layers", "|ΔATE|", &bars, &note),
    )?;
    for (w, study) in &run.bands {
        let tag = width_tag(*w);
        art.csv(&format!("ablation_bands_{tag}.csv"), &ablation_table(study))?;
        let mut layers: Vec<usize> = study.records.iter().map(|r| r.layer).collect();
        layers.dedup();
        let series: Vec<Series> = layers
            .iter()
            .map(|&l| Series {
                label: format!("layer {}", l + 1),
                points: study
                    .records
                    .iter()
                    .filter(|r| r.layer == l)
                    .filter_map(|r| r.scheme.band().map(|(lo, hi)| ((lo + hi) / 2.0, r.outcome.tmle.psi)))
                    .collect(),
            })
            .collect();
        let chart = svg::line_chart(
            &format!("ATE after ablating importance bands of width {w}"),
            "band midpoint (importance quantile)",
            "ATE",
            &series,
            Some((study.baseline.psi, "baseline")),
            &note,
        );
        art.svg(&format!("ablation_bands_{tag}.svg"), &chart)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- tracing

#[derive(Clone, Debug)]
pub struct TraceStudy {
    pub graphs: Vec<PathwayGraph>,
    pub metrics: Vec<PathwayMetrics>,
    pub overlap: Matrix,
}

impl TraceStudy {
    /// Off-diagonal pairs with the highest and lowest overlap, ties to the
    /// first pair in row-major order.
    pub fn extreme_pairs(&self) -> Option<((usize, usize), (usize, usize))> {
        let n = self.graphs.len();
        let mut pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        let first = pairs.next()?;
        let (mut hi, mut lo) = (first, first);
        for (i, j) in pairs {
            let v = self.overlap.get(i, j);
            if v > self.overlap.get(hi.0, hi.1) {
                hi = (i, j);
            }
            if v < self.overlap.get(lo.0, lo.1) {
                lo = (i, j);
            }
        }
        Some((hi, lo))
    }
}

pub fn run_traces(cfg: &RunConfig, model: &Model) -> LabResult<TraceStudy> {
    let graphs = trace::trace_all_inputs(&model.net, &model.data().w, &cfg.trace_config()).stage("trace")?;
    let metrics = graphs.iter().map(trace::pathway_metrics).collect();
    let overlap = trace::overlap_matrix(&graphs);
    Ok(TraceStudy {
        graphs,
        metrics,
        overlap,
    })
}

fn input_label(i: usize) -> String {
    format!("W{}", i + 1)
}

pub fn write_traces(art: &mut Artifacts, study: &TraceStudy, overlays: bool) -> LabResult<()> {
    let mut t = Table::new(&["input", "sparsity", "success", "node_count", "failed_count"]);
    for (g, m) in study.graphs.iter().zip(&study.metrics) {
        t.row(vec![
            input_label(g.source_input),
            cell(m.sparsity),
            cell(m.success),
            cell(g.nodes.len()),
            cell(g.failed.len()),
        ]);
        art.dot(
            &format!("pathway_{}.dot", input_label(g.source_input)),
            &trace::export_graph(g, None),
        )?;
    }
    art.csv("pathway_metrics.csv", &t)?;

    let labels: Vec<String> = (0..study.graphs.len()).map(input_label).collect();
    let mut header = vec!["input"];
    header.extend(labels.iter().map(String::as_str));
    let mut ov = Table::new(&header);
    for (i, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend((0..labels.len()).map(|j| cell(study.overlap.get(i, j))));
        ov.row(row);
    }
    art.csv("overlap.csv", &ov)?;

    let note = art.header_line();
    art.svg(
        "overlap.svg",
        &svg::heatmap("Pathway overlap (Jaccard)", &labels, &study.overlap, &note),
    )?;
    let bars = |f: fn(&PathwayMetrics) -> f64| -> Vec<(String, f64)> {
        labels.iter().cloned().zip(study.metrics.iter().map(f)).collect()
    };
    art.svg(
        "sparsity.svg",
        &svg::bar_chart("Pathway sparsity", "sparsity", &bars(|m| m.sparsity), &note),
    )?;
    art.svg(
        "success.svg",
        &svg::bar_chart("Pathway success", "success", &bars(|m| m.success), &note),
    )?;

    if overlays {
        if let Some((hi, lo)) = study.extreme_pairs() {
            for (tag, (i, j)) in [("highest", hi), ("lowest", lo)] {
                let dot = trace::export_graph(&study.graphs[i], Some(&study.graphs[j]));
                art.dot(
                    &format!("overlay_{tag}_{}_{}.dot", input_label(i), input_label(j)),
                    &dot,
                )?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- sae

#[derive(Clone, Debug)]
pub struct CoderRun {
    pub model: SparseCoder,
    pub report: decomp::SaeTrainReport,
}

#[derive(Clone, Debug)]
pub struct SaeStudy {
    /// 1-based trunk layer the autoencoder reads.
    pub layer: usize,
    pub acts: Matrix,
    pub sae: CoderRun,
    /// `(input layer, output layer, run)`, both 1-based.
    pub transcoder: Option<(usize, usize, CoderRun)>,
}

pub fn run_sae(cfg: &RunConfig, model: &Model) -> LabResult<SaeStudy> {
    let depth = model.net.depth();
    let layer = cfg.sae.layer.unwrap_or(depth);
    if layer == 0 || layer > depth {
        return Err(LabError::Validation(format!("sae.layer: {layer} outside 1..={depth}")));
    }
    let mut layers = model.net.trunk_activations(&model.data().w).stage("sae")?;
    let sae_cfg = cfg.sae_config(model.net.hidden_size());
    let acts = layers[layer - 1].clone();
    let (coder, report) = decomp::train_sae(&acts, &sae_cfg).stage("sae")?;
    let transcoder = if cfg.sae.transcoder && depth > 1 {
        let (from, to) = if layer < depth {
            (layer, layer + 1)
        } else {
            (layer - 1, layer)
        };
        let out = layers.swap_remove(to - 1);
        let (m, r) = decomp::train_transcoder(&layers[from - 1], &out, &sae_cfg).stage("sae")?;
        Some((from, to, CoderRun { model: m, report: r }))
    } else {
        None
    };
    Ok(SaeStudy {
        layer,
        acts,
        sae: CoderRun { model: coder, report },
        transcoder,
    })
}

fn coder_json(run: &CoderRun) -> serde_json::Value {
    let r = &run.report;
    json!({
        "variant": run.model.variant.name(),
        "latent_dim": run.model.latent_dim(),
        "mse": r.reconstruction_mse,
        "mean_l0": r.mean_l0,
        "target_variance": r.target_variance,
        "relative_mse": r.reconstruction_mse / r.target_variance,
        "loss_curve": r.loss_curve,
    })
}

pub fn write_sae(art: &mut Artifacts, cfg: &RunConfig, model: &Model, study: &SaeStudy) -> LabResult<()> {
    let fp = formats::fingerprint_of(&art.fingerprint);
    let dump = ActivationDump {
        layer: study.layer,
        acts: study.acts.clone(),
    };
    art.write(
        &format!("activations_L{}.bin", study.layer),
        &formats::encode_activations(&dump, &fp),
    )?;
    art.write("sae.bin", &formats::encode_coder(&study.sae.model, &fp))?;
    let mut summary = coder_json(&study.sae);
    summary["layer"] = study.layer.into();
    if let Some((from, to, run)) = &study.transcoder {
        art.write("transcoder.bin", &formats::encode_coder(&run.model, &fp))?;
        let mut t = coder_json(run);
        t["input_layer"] = (*from).into();
        t["output_layer"] = (*to).into();
        summary["transcoder"] = t;
    }
    art.json("sae_metrics.json", summary)?;

    // top rows per latent, with the raw covariates of each row
    let codes = study.sae.model.encode(&study.acts).stage("sae")?;
    let raw = &model.prepared.raw;
    let mut header = vec!["latent".to_string(), "rank".into(), "row".into(), "activation".into()];
    header.extend((1..=raw.dim()).map(|j| format!("W{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(&header);
    for latent in 0..codes.cols() {
        let col: Vec<f64> = (0..codes.rows()).map(|i| codes.get(i, latent)).collect();
        let order = probes::rank_descending(&col);
        for (rank, &row) in order.iter().take(cfg.sae.top_rows).enumerate() {
            if col[row] <= 0.0 {
                break;
            }
            let mut cells = vec![cell(latent), cell(rank + 1), cell(row), cell(col[row])];
            cells.extend(raw.w.row(row).iter().map(cell));
            t.row(cells);
        }
    }
    art.csv("sae_top_activations.csv", &t)?;

    let curve = Series {
        label: study.sae.model.variant.name().into(),
        points: study
            .sae
            .report
            .loss_curve
            .iter()
            .enumerate()
            .map(|(e, &l)| (e as f64, l))
            .collect(),
    };
    let note = art.header_line();
    art.svg(
        "sae_loss.svg",
        &svg::line_chart("Sparse autoencoder loss", "epoch", "loss", &[curve], None, &note),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- synthgen

#[derive(Clone, Debug)]
pub struct Sweeps {
    pub sigma_hat: f64,
    pub confounding: SweepReport,
    pub confounding_data: Vec<Dataset>,
    pub effect: SweepReport,
    pub effect_data: Vec<Dataset>,
}

pub fn run_synthgen(cfg: &RunConfig, model: &Model) -> LabResult<Sweeps> {
    let s = &cfg.synthgen;
    if s.confounder >= model.net.input_dim() {
        return Err(LabError::Validation(format!(
            "synthgen.confounder: no covariate column {}",
            s.confounder
        )));
    }
    let train = model.data().select_rows(&model.train_rows(cfg));
    let sigma_hat = synthgen::residual_sd(&model.net, &train).stage("synthgen")?;
    let seed = cfg.stage_seed(s.seed, "synthgen");
    let nets = BaseNets {
        q_net: &model.net,
        g_net: &model.net,
    };
    let trunc = cfg.tmle.truncation;
    let w = &model.data().w;
    let (confounding, confounding_data) =
        synthgen::confounding_sweep(nets, w, s.confounder, &s.alphas, sigma_hat, trunc, seed).stage("synthgen")?;
    let (effect, effect_data) = synthgen::effect_sweep(nets, w, &s.betas, sigma_hat, trunc, seed).stage("synthgen")?;
    Ok(Sweeps {
        sigma_hat,
        confounding,
        confounding_data,
        effect,
        effect_data,
    })
}

fn sweep_table(report: &SweepReport) -> Table {
    let mut t = Table::new(&["factor", "naive", "plugin", "tmle", "ci_low", "ci_high", "se"]);
    for r in &report.rows {
        t.row(vec![
            cell(r.factor),
            cell(r.naive),
            cell(r.plugin_ate),
            cell(r.tmle.psi),
            cell(r.tmle.ci95.0),
            cell(r.tmle.ci95.1),
            cell(r.tmle.se),
        ]);
    }
    t
}

fn sweep_json(report: &SweepReport) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "factor": r.factor,
                "naive": r.naive,
                "plugin": r.plugin_ate,
                "tmle": r.tmle.psi,
                "se": r.tmle.se,
                "ci95": [r.tmle.ci95.0, r.tmle.ci95.1],
            })
        })
        .collect();
    json!({ "baseline_psi": report.baseline_psi, "rows": rows })
}

/// Spearman correlation between the factor and `|naive − plugin|`.
pub fn bias_trend(report: &SweepReport) -> f64 {
    let bias: Vec<f64> = report.rows.iter().map(|r| (r.naive - r.plugin_ate).abs()).collect();
    stats::spearman(&report.factors, &bias)
}

/// Largest `|plugin(β) − β·plugin(1)|` over the sweep.
pub fn proportionality_gap(report: &SweepReport) -> f64 {
    let Some(one) = report.rows.iter().find(|r| r.factor == 1.0) else {
        return f64::NAN;
    };
    report
        .rows
        .iter()
        .map(|r| (r.plugin_ate - r.factor * one.plugin_ate).abs())
        .fold(0.0, f64::max)
}

pub fn write_synthgen(art: &mut Artifacts, cfg: &RunConfig, model: &Model, sweeps: &Sweeps) -> LabResult<()> {
    art.csv("sweep_confounding.csv", &sweep_table(&sweeps.confounding))?;
    art.csv("sweep_effect.csv", &sweep_table(&sweeps.effect))?;
    let mut conf = sweep_json(&sweeps.confounding);
    conf["confounder"] = input_label(cfg.synthgen.confounder).into();
    conf["bias_trend_spearman"] = bias_trend(&sweeps.confounding).into();
    let mut eff = sweep_json(&sweeps.effect);
    eff["proportionality_gap"] = proportionality_gap(&sweeps.effect).into();
    art.json(
        "sweep.json",
        json!({ "sigma_hat": sweeps.sigma_hat, "confounding": conf, "effect": eff }),
    )?;

    if cfg.synthgen.write_datasets {
        let raw_w = &model.prepared.raw.w;
        for (kind, report, data) in [
            ("alpha", &sweeps.confounding, &sweeps.confounding_data),
            ("beta", &sweeps.effect, &sweeps.effect_data),
        ] {
            for (row, ds) in report.rows.iter().zip(data) {
                // generated rows share the source covariates; write them on the original scale
                let out = Dataset {
                    w: raw_w.clone(),
                    ..ds.clone()
                };
                let comments = vec![
                    art.header_line(),
                    format!(
                        "{kind}={} plugin_ate={} sigma_hat={}",
                        row.factor, row.plugin_ate, sweeps.sigma_hat
                    ),
                ];
                art.write(
                    &format!("generated_{kind}_{}.csv", row.factor),
                    formats::dataset_csv(&out, &comments).as_bytes(),
                )?;
            }
        }
    }

    let note = art.header_line();
    let line = |report: &SweepReport, f: fn(&synthgen::SweepRow) -> f64, label: &str| Series {
        label: label.into(),
        points: report.rows.iter().map(|r| (r.factor, f(r))).collect(),
    };
    let c = &sweeps.confounding;
    art.svg(
        "sweep_confounding.svg",
        &svg::line_chart(
            "Confounding sweep",
            "α",
            "ATE",
            &[
                line(c, |r| r.naive, "naive"),
                line(c, |r| r.plugin_ate, "plugin"),
                line(c, |r| r.tmle.psi, "TMLE"),
            ],
            None,
            &note,
        ),
    )?;
    let e = &sweeps.effect;
    art.svg(
        "sweep_effect.svg",
        &svg::line_chart(
            "Effect sweep",
            "β",
            "ATE",
            &[
                line(e, |r| r.naive, "naive"),
                line(e, |r| r.plugin_ate, "plugin"),
                line(e, |r| r.tmle.psi, "TMLE"),
            ],
            None,
            &note,
        ),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- experiments

fn probe_summary(study: &ProbeStudy) -> serde_json::Value {
    let layers: Vec<serde_json::Value> = study
        .reports
        .iter()
        .zip(&study.curves)
        .map(|(r, c)| {
            json!({
                "layer": r.layer + 1,
                "r2": r.r2,
                "count50": c.count(0.5),
                "count75": c.count(0.75),
                "count95": c.count(0.95),
            })
        })
        .collect();
    json!({
        "target": input_label(study.target),
        "layers": layers,
        "depth_r2_spearman": study.depth_trend(),
    })
}

/// Probing, ablation and band sweeps on DS1.
fn exp1(art: &mut Artifacts, cfg: &RunConfig, cache: Option<&Path>) -> LabResult<()> {
    let model = fit(cfg, cache)?;
    write_training(art, &model)?;
    let tmle = run_tmle(cfg, &model)?;
    write_tmle(art, &model, &tmle, false)?;
    let probes = run_probes(cfg, &model)?;
    write_probes(art, &probes)?;
    let ablation = run_ablation(cfg, &model, &probes.reports)?;
    write_ablation(art, &ablation)?;
    let deep: Vec<serde_json::Value> = ablation
        .deep_effects(3)
        .into_iter()
        .map(|(s, v)| json!({ "scheme": s.name(), "mean_abs_delta_ate": v }))
        .collect();
    art.json(
        "summary.json",
        json!({
            "experiment": "exp1",
            "tmle": tmle_json(&tmle, model.data().true_ate),
            "probes": probe_summary(&probes),
            "ablation_deepest_three": deep,
        }),
    )?;
    Ok(())
}

fn trace_summary(study: &TraceStudy) -> serde_json::Value {
    let inputs: Vec<serde_json::Value> = study
        .graphs
        .iter()
        .zip(&study.metrics)
        .map(|(g, m)| {
            json!({
                "input": input_label(g.source_input),
                "sparsity": m.sparsity,
                "success": m.success,
                "node_count": g.nodes.len(),
                "failed_count": g.failed.len(),
            })
        })
        .collect();
    let mut out = json!({ "inputs": inputs });
    if let Some((hi, lo)) = study.extreme_pairs() {
        out["highest_overlap"] = json!([input_label(hi.0), input_label(hi.1), study.overlap.get(hi.0, hi.1)]);
        out["lowest_overlap"] = json!([input_label(lo.0), input_label(lo.1), study.overlap.get(lo.0, lo.1)]);
    }
    out
}

/// Pathway tracing on DS2.
fn exp2(art: &mut Artifacts, cfg: &RunConfig, cache: Option<&Path>) -> LabResult<()> {
    let model = fit(cfg, cache)?;
    write_training(art, &model)?;
    let tmle = run_tmle(cfg, &model)?;
    write_tmle(art, &model, &tmle, false)?;
    let traces = run_traces(cfg, &model)?;
    write_traces(art, &traces, false)?;
    art.json(
        "summary.json",
        json!({
            "experiment": "exp2",
            "tmle": tmle_json(&tmle, model.data().true_ate),
            "pathways": trace_summary(&traces),
        }),
    )?;
    Ok(())
}

/// Pathway tracing on DS1 with overlays of the most and least similar pathways.
fn exp3(art: &mut Artifacts, cfg: &RunConfig, cache: Option<&Path>) -> LabResult<()> {
    let model = fit(cfg, cache)?;
    let traces = run_traces(cfg, &model)?;
    write_traces(art, &traces, true)?;
    art.json(
        "summary.json",
        json!({ "experiment": "exp3", "pathways": trace_summary(&traces) }),
    )?;
    Ok(())
}
