use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use xlsr::container::has_magic;
use xlsr::image::{read_png, write_png};
use xlsr::metrics::{upscale_image, EvalReport, MetricMode};
use xlsr::model::{build_model, load_checkpoint, param_count, Graph, CHECKPOINT_MAGIC};
use xlsr::quant::{calibrate, quantization_drop_report, quantize_model, quantized_forward, DropReport, QMODEL_MAGIC};
use xlsr::synth::write_synth_dataset;
use xlsr::train::{train, Dataset, ImagePair, BEST_CHECKPOINT};
use xlsr::{ModelConfig, ModelParams, Network, OutputHead, QuantizedModel, RgbImage, Tensor};

use crate::args::{CommonArgs, Split};
use crate::config::{RunConfig, RunManifest};

pub const QMODEL_FILE: &str = "model.qmodel";
pub const QUANT_REPORT: &str = "quant_report";
pub const EVAL_REPORT: &str = "eval_report";
pub const ABLATION_REPORT: &str = "ablation";
pub const TIMING_FILE: &str = "timing.json";
pub const TRAIN_SUMMARY: &str = "train_summary.json";

pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().with_context(|| format!("--{flag} is required for this command"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_dataset(data: &Path, run: &RunConfig) -> Result<Dataset> {
    Dataset::load(data, run.model.scale, &run.train).with_context(|| format!("loading dataset {}", data.display()))
}

/// A trained float model or a quantized one, told apart by file magic.
pub enum LoadedModel {
    Float { params: ModelParams, network: Network },
    Uint8(QuantizedModel),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        if has_magic(path, QMODEL_MAGIC) {
            let q = QuantizedModel::load(path).with_context(|| format!("loading {}", path.display()))?;
            Ok(LoadedModel::Uint8(q))
        } else if has_magic(path, CHECKPOINT_MAGIC) {
            let (params, config) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            Ok(LoadedModel::Float { params, network: Network::new(config)? })
        } else {
            bail!("{} is neither a checkpoint nor a quantized model", path.display())
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedModel::Float { network, .. } => network.config(),
            LoadedModel::Uint8(q) => &q.config,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LoadedModel::Float { .. } => "float",
            LoadedModel::Uint8(_) => "uint8",
        }
    }

    pub fn upscale(&self, image: &RgbImage) -> Result<RgbImage> {
        Ok(match self {
            LoadedModel::Float { params, network } => network.upscale(params, image)?,
            LoadedModel::Uint8(q) => quantized_forward(q, image)?,
        })
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    best_val_psnr: f64,
    best_epoch: Option<usize>,
    epochs: usize,
    final_loss: f64,
}

/// Trains from the seeded initialization; returns the best parameters.
fn train_model(model: &ModelConfig, run: &RunConfig, data: &Dataset, out: &Path) -> Result<ModelParams> {
    let params = build_model(model, run.train.rng_seed)?;
    log::info!(
        "training {} head: {} images, {} epochs x {} minibatches",
        model.head.as_str(),
        data.train.len(),
        run.train.epochs,
        run.train.minibatches_per_epoch
    );
    let (_, state) = train(model, params, data, &run.train, out, |r| {
        log::info!(
            "epoch {:>4}  lr {:.2e}  loss {:.5}  val {:.3} dB{}",
            r.epoch,
            r.lr,
            r.loss,
            r.val_psnr,
            if r.best { "  *" } else { "" }
        );
    })?;
    let summary = TrainSummary {
        best_val_psnr: state.best_psnr,
        best_epoch: state.history.iter().rev().find(|r| r.best).map(|r| r.epoch),
        epochs: state.epoch,
        final_loss: state.history.last().map_or(f64::NAN, |r| r.loss),
    };
    write_json(&out.join(TRAIN_SUMMARY), &summary)?;
    log::info!("best validation PSNR {:.3} dB", state.best_psnr);
    state.best_params.context("training produced no checkpoint")
}

pub fn cmd_train(common: &CommonArgs, run: &RunConfig) -> Result<()> {
    let (data, out) = (require(&common.data, "data")?, require(&common.out, "out")?);
    let dataset = load_dataset(data, run)?;
    train_model(&run.model, run, &dataset, out)?;
    println!("{}", out.join(BEST_CHECKPOINT).display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct QuantReport<'a> {
    #[serde(flatten)]
    drop: &'a DropReport,
    head: &'static str,
    eval_set: &'static str,
    calibration_images: Vec<String>,
}

impl QuantReport<'_> {
    fn to_tsv(&self) -> String {
        format!(
            "# head={} eval={} calibration={}\nfp32_psnr\tuint8_psnr\tdrop\n{:.4}\t{:.4}\t{:.4}\n",
            self.head,
            self.eval_set,
            self.calibration_images.join(","),
            self.drop.psnr_float,
            self.drop.psnr_uint8,
            self.drop.drop
        )
    }
}

/// The first `calibration_images` training images.
fn calibration_set<'a>(data: &'a Dataset, run: &RunConfig) -> Result<&'a [ImagePair]> {
    if data.train.is_empty() {
        bail!("no calibration images available");
    }
    let n = run.quant.calibration_images;
    if data.train.len() < n {
        log::warn!("only {} calibration images available, {n} requested", data.train.len());
    }
    Ok(&data.train[..n.min(data.train.len())])
}

/// Calibrates, quantizes, saves `out/model.qmodel` and reports the drop on the validation split.
fn quantize_and_report(
    params: &ModelParams,
    model: &ModelConfig,
    run: &RunConfig,
    data: &Dataset,
    out: &Path,
) -> Result<(QuantizedModel, DropReport)> {
    let calib = calibration_set(data, run)?;
    let images: Vec<Tensor> = calib.iter().map(|p| p.lr.to_unit()).collect();
    let ranges = calibrate(params, model, &images)?;
    let q = quantize_model(params, model, &ranges)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    q.save(&out.join(QMODEL_FILE))?;
    let drop = quantization_drop_report(params, &q, &data.val)?;
    let report = QuantReport {
        drop: &drop,
        head: model.head.as_str(),
        eval_set: "validation",
        calibration_images: calib.iter().map(|p| p.name.clone()).collect(),
    };
    write_json(&out.join(format!("{QUANT_REPORT}.json")), &report)?;
    write_text(&out.join(format!("{QUANT_REPORT}.tsv")), &report.to_tsv())?;
    Ok((q, drop))
}

pub fn cmd_quantize(common: &CommonArgs, run: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (data, out) = (require(&common.data, "data")?, require(&common.out, "out")?);
    let (params, model) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if common.scale.is_some_and(|s| s != model.scale) {
        bail!("--scale {} does not match the checkpoint's scale {}", common.scale.unwrap(), model.scale);
    }
    let run = RunConfig { model, ..run.clone() };
    let dataset = load_dataset(data, &run)?;
    let (_, drop) = quantize_and_report(&params, &model, &run, &dataset, out)?;
    println!("fp32_psnr\tuint8_psnr\tdrop\n{:.4}\t{:.4}\t{:.4}", drop.psnr_float, drop.psnr_uint8, drop.drop);
    Ok(())
}

fn select(data: &Dataset, split: Split) -> Vec<&ImagePair> {
    match split {
        Split::Train => data.train.iter().collect(),
        Split::Val => data.val.iter().collect(),
        Split::All => data.train.iter().chain(&data.val).collect(),
    }
}

fn evaluate(model: &LoadedModel, pairs: &[&ImagePair], mode: MetricMode, shave: usize) -> Result<EvalReport> {
    let outputs = pairs.iter().map(|p| model.upscale(&p.lr)).collect::<Result<Vec<_>>>()?;
    let triples = pairs.iter().zip(&outputs).map(|(p, sr)| (p.name.as_str(), sr, &p.hr));
    Ok(EvalReport::evaluate(model.kind(), mode, shave, triples)?)
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    method: String,
    fp32_psnr: f64,
    uint8_psnr: f64,
    drop: f64,
}

pub fn cmd_eval(
    common: &CommonArgs,
    run: &RunConfig,
    model_path: &Path,
    uint8: Option<&Path>,
    mode: MetricMode,
    shave: Option<usize>,
    split: Split,
) -> Result<()> {
    let data = require(&common.data, "data")?;
    let model = LoadedModel::load(model_path)?;
    let scale = model.config().scale;
    let shave = shave.unwrap_or(match mode {
        MetricMode::Rgb => 0,
        MetricMode::YChannel => scale,
    });
    let run = RunConfig { model: *model.config(), ..run.clone() };
    let dataset = load_dataset(data, &run)?;
    let pairs = select(&dataset, split);
    let report = evaluate(&model, &pairs, mode, shave)?;
    print!("{}", report.to_tsv());
    let mut reports = vec![report];
    if let Some(q) = uint8 {
        let qmodel = LoadedModel::load(q)?;
        if !matches!(model, LoadedModel::Float { .. }) || !matches!(qmodel, LoadedModel::Uint8(_)) {
            bail!("--uint8 compares a float --model with a quantized model");
        }
        if qmodel.config() != model.config() {
            bail!("{} and {} have different architectures", model_path.display(), q.display());
        }
        let qreport = evaluate(&qmodel, &pairs, mode, shave)?;
        print!("{}", qreport.to_tsv());
        reports.push(qreport);
    }
    if let Some(out) = &common.out {
        for r in &reports {
            let stem = format!("{EVAL_REPORT}_{}", r.source);
            write_text(&out.join(format!("{stem}.tsv")), &r.to_tsv())?;
            write_text(&out.join(format!("{stem}.json")), &(r.to_json() + "\n"))?;
        }
        if let [f, q] = reports.as_slice() {
            let row = ComparisonRow {
                method: format!("XLSR ({})", model.config().head.as_str()),
                fp32_psnr: f.mean_psnr,
                uint8_psnr: q.mean_psnr,
                drop: f.mean_psnr - q.mean_psnr,
            };
            let tsv = format!(
                "# mode={} shave={}\nmethod\tfp32_psnr\tuint8_psnr\tdrop\n{}\t{:.4}\t{:.4}\t{:.4}\n",
                mode.as_str(),
                shave,
                row.method,
                row.fp32_psnr,
                row.uint8_psnr,
                row.drop
            );
            print!("{tsv}");
            write_text(&out.join("comparison.tsv"), &tsv)?;
            write_json(&out.join("comparison.json"), &row)?;
        }
    }
    Ok(())
}

pub fn cmd_infer(common: &CommonArgs, model_path: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = LoadedModel::load(model_path)?;
    if common.scale.is_some_and(|s| s != model.config().scale) {
        bail!("--scale does not match the model's scale {}", model.config().scale);
    }
    let image = read_png(input)?;
    let sr = model.upscale(&image)?;
    write_png(output, &sr)?;
    println!("{}x{} -> {}x{} ({} path)", image.width, image.height, sr.width, sr.height, model.kind());
    Ok(())
}

#[derive(Debug, Serialize)]
struct LayerRow {
    name: String,
    kernel: [usize; 2],
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    params: usize,
}

pub fn cmd_inspect(common: &CommonArgs, run: &RunConfig, model_path: Option<&Path>) -> Result<()> {
    let model = match model_path {
        Some(p) => Some(LoadedModel::load(p)?),
        None => None,
    };
    let config = model.as_ref().map_or(run.model, |m| *m.config());
    let graph = Graph::build(&config)?;
    let layers: Vec<LayerRow> = graph
        .layers
        .iter()
        .map(|l| LayerRow {
            name: l.name.clone(),
            kernel: [l.conv.kernel_h, l.conv.kernel_w],
            in_channels: l.conv.in_channels,
            out_channels: l.conv.out_channels,
            groups: l.conv.groups,
            params: l.conv.param_count(),
        })
        .collect();
    let total = param_count(&config)?;
    let lint = graph.lint();
    println!("layer\tkernel\tin\tout\tgroups\tparams");
    for l in &layers {
        println!(
            "{}\t{}x{}\t{}\t{}\t{}\t{}",
            l.name, l.kernel[0], l.kernel[1], l.in_channels, l.out_channels, l.groups, l.params
        );
    }
    println!("total parameters\t{total}");
    println!(
        "lint\t{}\t(nodes {}, convolutions {}, concats {}, elementwise arithmetic {}, depth_to_space {}, other layout ops {})",
        if lint.passes() { "pass" } else { "FAIL" },
        lint.nodes,
        lint.convolutions,
        lint.concats,
        lint.elementwise_arithmetic,
        lint.depth_to_space,
        lint.other_layout_ops
    );
    let mut quant = None;
    if let Some(LoadedModel::Uint8(q)) = &model {
        println!("tensor\tscale\tzero_point");
        for l in &q.layers {
            println!("{}.weight\t{:e}\t{}", l.name, l.weight_qp.scale, l.weight_qp.zero_point);
        }
        for a in &q.activations {
            println!("{}\t{:e}\t{}", a.name, a.qp.scale, a.qp.zero_point);
        }
        quant = Some(serde_json::json!({
            "weights": q.layers.iter().map(|l| serde_json::json!({"name": l.name, "qp": l.weight_qp})).collect::<Vec<_>>(),
            "activations": q.activations,
            "requant": q.layers.iter().map(|l| serde_json::json!({"name": l.name, "requant": l.requant})).collect::<Vec<_>>(),
        }));
    }
    if let Some(out) = &common.out {
        let doc = serde_json::json!({
            "config": config,
            "layers": layers,
            "total_parameters": total,
            "lint": lint,
            "lint_passes": lint.passes(),
            "quantization": quant,
        });
        write_json(&out.join("inspect.json"), &doc)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub activation: String,
    pub fp32_psnr: f64,
    pub uint8_psnr: f64,
    pub drop: f64,
}

#[derive(Debug, Serialize)]
struct Ablation {
    rows: Vec<AblationRow>,
    bicubic_psnr: f64,
    eval_images: Vec<String>,
    calibration_images: Vec<String>,
    train_images: usize,
    epochs: usize,
    seed: u64,
}

impl Ablation {
    fn to_tsv(&self) -> String {
        let mut s = format!(
            "# eval={} validation images, rgb, shave 0; calibration={}; bicubic_psnr={:.4}\nactivation\tfp32_psnr\tuint8_psnr\tdrop\n",
            self.eval_images.len(),
            self.calibration_images.join(","),
            self.bicubic_psnr
        );
        for r in &self.rows {
            s.push_str(&format!("{}\t{:.4}\t{:.4}\t{:.4}\n", r.activation, r.fp32_psnr, r.uint8_psnr, r.drop));
        }
        s
    }
}

/// Mean RGB PSNR (no shave) of bicubic upscaling.
fn bicubic_psnr(pairs: &[ImagePair], scale: usize) -> Result<f64> {
    let outputs = pairs.iter().map(|p| upscale_image(&p.lr, scale)).collect::<xlsr::Result<Vec<_>>>()?;
    let triples = pairs.iter().zip(&outputs).map(|(p, sr)| (p.name.as_str(), sr, &p.hr));
    Ok(EvalReport::evaluate("bicubic", MetricMode::Rgb, 0, triples)?.mean_psnr)
}

pub fn cmd_ablate(common: &CommonArgs, run: &RunConfig) -> Result<()> {
    let (data, out) = (require(&common.data, "data")?, require(&common.out, "out")?);
    let dataset = load_dataset(data, run)?;
    let scale = run.model.scale;
    let bicubic = bicubic_psnr(&dataset.val, scale)?;
    log::info!("bicubic baseline {bicubic:.3} dB on {} validation images", dataset.val.len());
    let mut rows = Vec::new();
    let mut timing = serde_json::Map::new();
    for head in [OutputHead::ClippedRelu, OutputHead::Linear] {
        let model = run.model.with_head(head);
        let dir = out.join(head.as_str());
        let start = Instant::now();
        let params = train_model(&model, run, &dataset, &dir)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let (q, drop) = quantize_and_report(&params, &model, run, &dataset, &dir)?;
        let sample = &dataset.val[0];
        write_png(&dir.join("sample_uint8.png"), &quantized_forward(&q, &sample.lr)?)?;
        timing.insert(head.as_str().into(), serde_json::json!({ "train_seconds": train_seconds }));
        log::info!(
            "{}: fp32 {:.3} dB, uint8 {:.3} dB, drop {:.3} dB ({train_seconds:.0} s)",
            head.as_str(),
            drop.psnr_float,
            drop.psnr_uint8,
            drop.drop
        );
        rows.push(AblationRow {
            activation: head.as_str().into(),
            fp32_psnr: drop.psnr_float,
            uint8_psnr: drop.psnr_uint8,
            drop: drop.drop,
        });
    }
    let ablation = Ablation {
        rows,
        bicubic_psnr: bicubic,
        eval_images: dataset.val.iter().map(|p| p.name.clone()).collect(),
        calibration_images: calibration_set(&dataset, run)?.iter().map(|p| p.name.clone()).collect(),
        train_images: dataset.train.len(),
        epochs: run.train.epochs,
        seed: run.train.rng_seed,
    };
    let tsv = ablation.to_tsv();
    print!("{tsv}");
    write_text(&out.join(format!("{ABLATION_REPORT}.tsv")), &tsv)?;
    write_json(&out.join(format!("{ABLATION_REPORT}.json")), &ablation)?;
    write_json(&out.join(TIMING_FILE), &timing)?;
    Ok(())
}

pub fn cmd_synth(common: &CommonArgs, count: usize, size: usize) -> Result<()> {
    let out = require(&common.out, "out")?;
    if !size.is_multiple_of(common.scale.unwrap_or(3)) {
        log::warn!("image side {size} is not a multiple of the scale; loaders will crop it");
    }
    let files = write_synth_dataset(out, count, size, common.seed)?;
    println!("wrote {} images to {}", files.len(), out.join("hr").display());
    Ok(())
}

/// Parsed command line to run again: the recorded arguments, optionally with a new output directory.
pub fn rerun_args(manifest: &RunManifest, out: Option<&Path>) -> Vec<String> {
    let mut args = vec!["xlsr".to_string()];
    let mut skip = false;
    for a in &manifest.args {
        if skip {
            skip = false;
            continue;
        }
        if out.is_some() && a == "--out" {
            skip = true;
            continue;
        }
        if out.is_some() && a.starts_with("--out=") {
            continue;
        }
        args.push(a.clone());
    }
    if let Some(o) = out {
        args.push("--out".into());
        args.push(o.display().to_string());
    }
    args
}
