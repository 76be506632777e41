use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tamperloc::datasynth::{generate_corpus, procedural_canvas, procedural_object, SegmentedObject, Source};
use tamperloc::features::{image_features, write_feature_dump};
use tamperloc::gradsuite::run_suite;
use tamperloc::hilbert::hilbert_curve;
use tamperloc::imaging::{load_mask, load_rgb, resize_bilinear, resize_mask_nearest, save_mask};
use tamperloc::metrics::{
    argmax_mask, average_precision, extract_boxes, image_metrics, manipulation_scores, roc_from_slices,
    summarize, write_metrics_csv, write_summary_csv, IOU_THRESHOLD, MIN_BOX_AREA,
};
use tamperloc::network::{Model, NetworkConfig};
use tamperloc::nn::Mode;
use tamperloc::training::{
    load_manifest, load_sample, train as run_training, write_loss_csv, CheckpointPaths, Control, LabeledSample,
    ManifestRecord, PreparedSample, Split,
};
use tamperloc::{Error, Result, Tensor};

use crate::config::RunConfig;

fn required<'a>(value: Option<&'a PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .map(PathBuf::as_path)
        .ok_or_else(|| Error::Argument(format!("{what} is required")))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// PNG files of a directory, sorted by name.
fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    out.sort();
    Ok(out)
}

fn profile_name(config: &NetworkConfig) -> &'static str {
    if *config == NetworkConfig::desk() {
        "desk"
    } else if *config == NetworkConfig::full() {
        "full"
    } else {
        "custom"
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of host PNG images.
    #[arg(long)]
    sources: Option<PathBuf>,
    /// Directory of RGBA object PNGs (alpha marks the object).
    #[arg(long)]
    objects: Option<PathBuf>,
    /// Use this many generated host images instead of --sources.
    #[arg(long)]
    procedural_sources: Option<usize>,
    /// Use this many generated objects instead of --objects.
    #[arg(long)]
    procedural_objects: Option<usize>,
}

pub fn synth(run: &RunConfig, a: SynthArgs) -> Result<bool> {
    let out = run.out_dir()?;
    let side = run.synth.crop_side;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let sources: Vec<Source> = match a.procedural_sources {
        Some(n) => (0..n)
            .map(|i| Source::Memory {
                id: format!("host{i}"),
                image: procedural_canvas(side, side, &mut rng),
            })
            .collect(),
        None => pngs(required(a.sources.as_ref().or(run.paths.sources.as_ref()), "--sources")?)?
            .into_iter()
            .map(Source::File)
            .collect(),
    };
    let objects: Vec<SegmentedObject> = match a.procedural_objects {
        Some(n) => (0..n)
            .map(|i| procedural_object(format!("obj{i}"), (side / 8).max(3), &mut rng))
            .collect::<Result<_>>()?,
        None => pngs(required(a.objects.as_ref().or(run.paths.objects.as_ref()), "--objects")?)?
            .iter()
            .map(|p| SegmentedObject::load(p, "object"))
            .collect::<Result<_>>()?,
    };
    let report = generate_corpus(&sources, &objects, &run.synth, out)?;
    for s in &report.skipped {
        log::warn!("skipped {s}: smaller than the {side}px crop");
    }
    println!(
        "{} images from {} sources ({} skipped); manifest {}",
        report.records.len(),
        sources.len(),
        report.skipped.len(),
        report.manifest.display()
    );
    Ok(true)
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// PNG images; each is resized to the profile's input side.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

pub fn features(run: &RunConfig, a: FeaturesArgs) -> Result<bool> {
    let out = run.out_dir()?;
    fs::create_dir_all(out)?;
    let side = run.network.input_side;
    a.images.par_iter().try_for_each(|path| -> Result<()> {
        let image = fit(load_rgb(path)?, side)?;
        let feats = image_features(&image, &run.network.features)?;
        let mut w = BufWriter::new(File::create(out.join(format!("{}.frsf", stem(path))))?);
        write_feature_dump(&mut w, &feats)?;
        w.flush()?;
        Ok(())
    })?;
    println!("{} feature dumps in {}", a.images.len(), out.display());
    Ok(true)
}

fn fit(image: Tensor, side: usize) -> Result<Tensor> {
    let (h, w, _) = image.dims3()?;
    if h == side && w == side {
        Ok(image)
    } else {
        resize_bilinear(&image, side, side)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sample manifest (JSON lines).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides the configured iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn load_split(records: &[ManifestRecord], split: Split, side: usize) -> Result<Vec<LabeledSample>> {
    records
        .par_iter()
        .filter(|r| r.split == split)
        .map(|r| load_sample(r)?.resized(side))
        .collect()
}

pub fn train(run: &RunConfig, a: TrainArgs) -> Result<bool> {
    let out = run.out_dir()?;
    let manifest = required(a.manifest.as_ref().or(run.paths.manifest.as_ref()), "--manifest")?;
    let records = load_manifest(manifest)?;
    let side = run.network.input_side;
    let train_samples = load_split(&records, Split::Train, side)?;
    let val_samples = load_split(&records, Split::Validation, side)?;
    let mut config = run.train.clone();
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    let mut model = match &a.init {
        Some(p) => Model::load(p)?,
        None => Model::new(run.network.clone(), run.seed)?,
    };
    fs::create_dir_all(out)?;
    let paths = match &run.paths.checkpoint {
        Some(c) => CheckpointPaths {
            latest: c.clone(),
            best: c.with_extension("best.floc"),
        },
        None => CheckpointPaths::in_dir(out),
    };
    let train_set = PreparedSample::prepare_all(&model, &train_samples)?;
    let val_set = PreparedSample::prepare_all(&model, &val_samples)?;
    log::info!(
        "training on {} samples ({} validation) for {} iterations",
        train_set.len(),
        val_set.len(),
        config.iterations
    );
    let every = config.checkpoint_every;
    let report = run_training(&mut model, &train_set, &val_set, &config, Some(&paths), |r, _| {
        if r.iteration % every == 0 {
            log::info!("iteration {}: train loss {:.6}", r.iteration, r.train_loss);
        }
        Control::Continue
    })?;
    write_loss_csv(BufWriter::new(File::create(out.join("loss.csv"))?), &report.history)?;
    fs::write(out.join("run.json"), serde_json::to_string_pretty(run)?)?;
    if let Some(at) = report.diverged_at {
        eprintln!("loss diverged at iteration {at}; kept the last finite checkpoint");
        model.save(&paths.latest)?;
        return Ok(false);
    }
    println!(
        "{} iterations, final train loss {:.6}; checkpoint {}",
        report.history.len(),
        report.history.last().map_or(f64::NAN, |r| r.train_loss),
        paths.latest.display()
    );
    Ok(true)
}

/// Sidecar describing a raw probability map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    /// `[H, W, 2]`, row-major little-endian f64.
    pub shape: Vec<usize>,
    pub profile: String,
    pub image: PathBuf,
}

pub const MAP_EXT: &str = "probs.f64";

fn map_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.{MAP_EXT}")),
        dir.join(format!("{stem}.probs.json")),
        dir.join(format!("{stem}_pred.png")),
    )
}

fn write_map(path: &Path, probs: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in probs.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_map(raw: &Path, sidecar: &Path) -> Result<Tensor> {
    let meta: MapSidecar = serde_json::from_str(&fs::read_to_string(sidecar)?)
        .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
    let bytes = fs::read(raw)?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, sidecar shape {:?} needs {}",
            raw.display(),
            bytes.len(),
            meta.shape,
            n * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(meta.shape, data)
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Predict every image listed in this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Individual PNG images.
    images: Vec<PathBuf>,
}

pub fn predict(run: &RunConfig, a: PredictArgs) -> Result<bool> {
    let out = run.out_dir()?;
    let checkpoint = required(run.paths.checkpoint.as_ref(), "--checkpoint")?;
    let model = Model::load(checkpoint)?;
    let mut images = a.images;
    if let Some(m) = a.manifest.as_ref().or(run.paths.manifest.as_ref()) {
        images.extend(load_manifest(m)?.into_iter().map(|r| r.image));
    }
    if images.is_empty() {
        return Err(Error::Argument("no images to predict (--manifest or paths)".into()));
    }
    fs::create_dir_all(out)?;
    let side = model.config.input_side;
    let profile = profile_name(&model.config);
    images.par_iter().try_for_each(|path| -> Result<()> {
        let probs = model.predict(&fit(load_rgb(path)?, side)?, Mode::Infer)?;
        let (raw, sidecar, mask) = map_paths(out, &stem(path));
        write_map(&raw, &probs)?;
        let meta = MapSidecar {
            shape: probs.shape().to_vec(),
            profile: profile.into(),
            image: path.clone(),
        };
        fs::write(&sidecar, serde_json::to_string_pretty(&meta)?)?;
        save_mask(&mask, &argmax_mask(&probs)?)
    })?;
    println!("{} predictions in {}", images.len(), out.display());
    Ok(true)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest with ground-truth masks.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory written by `predict`; defaults to --out.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

pub fn eval(run: &RunConfig, a: EvalArgs) -> Result<bool> {
    let out = run.out_dir()?;
    let manifest = required(a.manifest.as_ref().or(run.paths.manifest.as_ref()), "--manifest")?;
    let pred_dir = a.predictions.as_deref().unwrap_or(out);
    let records = load_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::Argument("manifest lists no images".into()));
    }
    struct Scored {
        metrics: tamperloc::metrics::ImageMetrics,
        ap: Option<f64>,
        scores: Vec<f64>,
        labels: Vec<bool>,
    }
    let scored: Vec<Scored> = records
        .par_iter()
        .map(|r| -> Result<Scored> {
            let name = stem(&r.image);
            let (raw, sidecar, _) = map_paths(pred_dir, &name);
            let probs = read_map(&raw, &sidecar)?;
            let (h, w, _) = probs.dims3()?;
            let mut truth = load_mask(&r.mask)?;
            if truth.shape() != [h, w] {
                truth = resize_mask_nearest(&truth, h, w)?;
            }
            let metrics = image_metrics(name, &probs, &truth)?;
            let scores = manipulation_scores(&probs)?;
            let truth_boxes = extract_boxes(&truth, &Tensor::filled(&[h, w], 1.0), 1)?;
            let ap = if truth_boxes.is_empty() {
                None
            } else {
                let pred_boxes = extract_boxes(&argmax_mask(&probs)?, &scores, MIN_BOX_AREA)?;
                Some(average_precision(&pred_boxes, &truth_boxes, IOU_THRESHOLD)?)
            };
            Ok(Scored {
                metrics,
                ap,
                labels: truth.data().iter().map(|&v| v == 1.0).collect(),
                scores: scores.data().to_vec(),
            })
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(out)?;
    let rows: Vec<_> = scored.iter().map(|s| s.metrics.clone()).collect();
    write_metrics_csv(BufWriter::new(File::create(out.join("metrics.csv"))?), &rows)?;
    let aps: Vec<f64> = scored.iter().filter_map(|s| s.ap).collect();
    let mean_ap = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    let summary = summarize(&rows)?;
    write_summary_csv(BufWriter::new(File::create(out.join("summary.csv"))?), &summary, mean_ap)?;
    let scores: Vec<f64> = scored.iter().flat_map(|s| s.scores.iter().copied()).collect();
    let labels: Vec<bool> = scored.iter().flat_map(|s| s.labels.iter().copied()).collect();
    match roc_from_slices(&scores, &labels) {
        Ok(curve) => curve.write_csv(BufWriter::new(File::create(out.join("roc.csv"))?))?,
        Err(Error::Argument(m)) => log::warn!("no pooled ROC: {m}"),
        Err(e) => return Err(e),
    }
    println!(
        "{} images, mean accuracy {:.4}, mean AUC {}, AP {}",
        summary.images,
        summary.mean_accuracy,
        summary.mean_auc.map_or("n/a".into(), |v| format!("{v:.4}")),
        mean_ap.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(true)
}

#[derive(Debug, Args)]
pub struct HilbertArgs {
    /// Curve order k; the grid is 2^k × 2^k.
    #[arg(long, default_value_t = 3)]
    order: u32,
}

pub fn hilbert(a: HilbertArgs) -> Result<bool> {
    let curve = hilbert_curve(a.order)?;
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    writeln!(w, "timestep,row,col")?;
    for (t, (r, c)) in curve.cells().iter().enumerate() {
        writeln!(w, "{t},{r},{c}")?;
    }
    w.flush()?;
    Ok(true)
}

pub fn gradcheck(run: &RunConfig) -> Result<bool> {
    let results = run_suite(run.seed)?;
    let mut text = String::new();
    for (name, report) in &results {
        text.push_str(&format!("{name}: {report}\n"));
    }
    print!("{text}");
    if let Some(out) = &run.paths.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.txt"), &text)?;
    }
    Ok(results.iter().all(|(_, r)| r.passed))
}
