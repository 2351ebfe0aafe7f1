//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cir_core::analysis::{
    normalized_histogram, pairwise_similarity_sample, similarity_gap, Histogram, DEFAULT_RANGE,
};
use cir_core::combiner::{
    read_checkpoint, write_checkpoint, Checkpoint, CombineMode, CombinerParams,
};
use cir_core::preprocess::{aspect_histogram, aspect_ratio, retained_fraction, Pipeline};
use cir_core::retrieval::{build_index, combine_features, combine_queries, evaluate};
use cir_core::store::{
    load_annotations, read_embeddings, EmbeddingMatrix, ImageLookup, SampleSpec, Split, SynthTask,
    TripletSet,
};
use cir_core::training::{train_combiner, Validation};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bundle::{Bundle, BundleParts};
use crate::config::{Overrides, RunConfig};
use crate::{
    AnalyzeArgs, EvalArgs, IngestArgs, PreprocessArgs, RetrieveArgs, SynthArgs, TrainArgs,
    UsageError,
};

/// Seed offset separating the validation sample from the training sample.
const VAL_SEED_MIX: u64 = 0x5E_ED0F_7A1D;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (`cir ... | head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!(UsageError(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn manifest_summary(bundle: &Bundle) -> serde_json::Value {
    json!({
        "bundle": bundle.dir.display().to_string(),
        "manifest": bundle.manifest,
    })
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.n_train == 0 || a.n_val == 0 {
        bail!(UsageError("--n-train and --n-val must be >= 1".into()));
    }
    let task = SynthTask::new(a.seed, a.dim, a.mixing)?;
    let train = task.sample(&SampleSpec {
        seed: a.seed,
        n_triplets: a.n_train,
        // Training only ever looks at its own targets.
        n_distractors: 0,
        noise_sigma: a.noise_sigma,
        id_prefix: "train-".into(),
        split: Split::Train,
    })?;
    let val = task.sample(&SampleSpec {
        seed: a.seed ^ VAL_SEED_MIX,
        n_triplets: a.n_val,
        n_distractors: a.distractors.unwrap_or(a.n_val),
        noise_sigma: a.noise_sigma,
        id_prefix: "val-".into(),
        split: Split::Val,
    })?;
    let images =
        EmbeddingMatrix::concat(&[&train.reference, &train.gallery, &val.reference], false)?;
    let captions = EmbeddingMatrix::concat(&[&train.caption, &val.caption], false)?;
    let bundle = Bundle::write(
        &a.out,
        BundleParts {
            images,
            gallery: val.gallery,
            captions,
            train: Some(train.triplets),
            val: val.triplets,
        },
    )?;
    print_json(&manifest_summary(&bundle))
}

fn load_split(paths: &[PathBuf], a: &IngestArgs, split: Split) -> Result<TripletSet> {
    let mut records = Vec::new();
    for p in paths {
        require_file(p, "annotation file")?;
        let set = load_annotations(p, a.schema, split)
            .with_context(|| format!("loading {}", p.display()))?;
        records.extend(set.records);
    }
    Ok(TripletSet::new(records, split)?)
}

fn load_matrix(path: &Path, what: &str) -> Result<EmbeddingMatrix> {
    require_file(path, what)?;
    read_embeddings(path).with_context(|| format!("reading {}", path.display()))
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let train = if a.train.is_empty() {
        None
    } else {
        Some(load_split(&a.train, &a, Split::Train)?)
    };
    let val = load_split(&a.val, &a, Split::Val)?;
    let image_parts = a
        .images
        .iter()
        .map(|p| load_matrix(p, "image embedding file"))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&EmbeddingMatrix> = image_parts.iter().collect();
    let images = EmbeddingMatrix::concat(&refs, true)?;
    let gallery = match &a.gallery {
        Some(p) => load_matrix(p, "gallery embedding file")?,
        None => images.clone(),
    };
    let captions = load_matrix(&a.captions, "caption embedding file")?;
    let bundle = Bundle::write(
        &a.out,
        BundleParts {
            images,
            gallery,
            captions,
            train,
            val,
        },
    )?;
    print_json(&manifest_summary(&bundle))
}

fn open_bundle(path: &Path) -> Result<Bundle> {
    require_file(path, "bundle")?;
    Bundle::open(path)
}

fn load_checkpoint(path: &Path, dim: usize) -> Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    let ckpt = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    if ckpt.params.d != dim {
        return Err(cir_core::Error::ShapeMismatch(format!(
            "checkpoint dimension {} does not match embedding dimension {dim}",
            ckpt.params.d
        ))
        .into());
    }
    Ok(ckpt)
}

/// Resolves the combine mode and parameters from the configuration and an
/// optional checkpoint. Without a checkpoint only `sum` is possible.
fn resolve_model(
    requested: Option<CombineMode>,
    checkpoint: Option<&Path>,
    dim: usize,
) -> Result<(CombineMode, Option<CombinerParams<f32>>)> {
    match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p, dim)?;
            Ok((requested.unwrap_or(ckpt.mode), Some(ckpt.params)))
        }
        None => match requested.unwrap_or(CombineMode::Sum) {
            CombineMode::Sum => Ok((CombineMode::Sum, None)),
            m => bail!(UsageError(format!("mode {m} needs --checkpoint"))),
        },
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    epoch: usize,
    train_loss: f64,
    val_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_seconds: Option<f64>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut o = Overrides::default();
    a.cfg.apply(&mut o);
    a.train.apply(&mut o);
    let cfg = RunConfig::load(a.cfg.config.as_deref(), o.into_map())?;
    let bundle = open_bundle(&a.bundle)?;
    let train = bundle.align_split(Split::Train)?;
    let val = bundle.align_split(Split::Val)?;
    let gallery = build_index(&bundle.gallery)?;
    let mode = cfg.mode.unwrap_or(CombineMode::Full);

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut log_err = None;
    let result = train_combiner(
        &train,
        Validation {
            queries: &val,
            gallery: &gallery,
            options: cfg.eval_options(),
        },
        &cfg.train,
        mode,
        |rec| {
            let line = LogLine {
                epoch: rec.epoch,
                train_loss: rec.train_loss,
                val_metric: rec.val_metric,
                wall_seconds: a.timings.then_some(rec.wall_seconds),
            };
            let text = serde_json::to_string(&line).expect("log lines serialize");
            if let Err(e) = writeln!(log, "{text}") {
                log_err.get_or_insert(e);
            }
        },
    );
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let (params, history) = result?;
    write_checkpoint(&Checkpoint { params, mode }, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&json!({
        "checkpoint": a.out.display().to_string(),
        "log": log_path.display().to_string(),
        "mode": mode.as_str(),
        "epochs_run": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val_metric": history.best_metric(),
        "stopped_early": history.stopped_early,
    }))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut o = Overrides::default();
    a.cfg.apply(&mut o);
    let cfg = RunConfig::load(a.cfg.config.as_deref(), o.into_map())?;
    let bundle = open_bundle(&a.bundle)?;
    let (mode, params) = resolve_model(cfg.mode, a.checkpoint.as_deref(), bundle.dim())?;
    let val = bundle.align_split(Split::Val)?;
    let gallery = build_index(&bundle.gallery)?;
    let report = evaluate(&val, params.as_ref(), mode, &gallery, &cfg.eval_options())?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.output {
        write_text(out, &(text.clone() + "\n"))?;
    }
    emit(&format!("{text}\n\n{}", report.to_table()))
}

#[derive(Debug, Serialize)]
struct Ranked<'a> {
    id: &'a str,
    score: f32,
}

pub fn retrieve(a: RetrieveArgs) -> Result<()> {
    let bundle = a.bundle.as_deref().map(open_bundle).transpose()?;
    let pick = |explicit: &Option<PathBuf>,
                from_bundle: fn(&Bundle) -> &EmbeddingMatrix,
                what: &str|
     -> Result<EmbeddingMatrix> {
        match (explicit, &bundle) {
            (Some(p), _) => load_matrix(p, what),
            (None, Some(b)) => Ok(from_bundle(b).clone()),
            (None, None) => bail!(UsageError(format!("--{what} is required without --bundle"))),
        }
    };
    let gallery = pick(&a.gallery, |b| &b.gallery, "gallery")?;
    let images = match (&a.images, &bundle) {
        (None, None) => gallery.clone(),
        _ => pick(&a.images, |b| &b.images, "images")?,
    };
    let captions = pick(&a.captions, |b| &b.captions, "captions")?;

    let sources = [&images, &gallery];
    let lookup = ImageLookup::new(&sources);
    let reference = lookup
        .get(&a.reference_id)
        .ok_or_else(|| cir_core::Error::UnknownId(a.reference_id.clone()))?;
    let caption = captions
        .row_by_id(&a.caption_id)
        .ok_or_else(|| cir_core::Error::UnknownId(format!("caption:{}", a.caption_id)))?;
    if reference.len() != caption.len() || caption.len() != gallery.dim() {
        return Err(cir_core::Error::ShapeMismatch(format!(
            "reference {} / caption {} / gallery {} dimensions differ",
            reference.len(),
            caption.len(),
            gallery.dim()
        ))
        .into());
    }
    let (mode, params) = resolve_model(a.mode, a.checkpoint.as_deref(), gallery.dim())?;
    let d = gallery.dim();
    let img = reference.to_shape((1, d))?.to_owned();
    let txt = caption.to_shape((1, d))?.to_owned();
    let combined = combine_features(img.view(), txt.view(), params.as_ref(), mode)?;
    let index = build_index(&gallery)?;
    let excluded = a.exclude_reference.then_some(a.reference_id.as_str());
    let result = index.search(combined.row(0), a.k, excluded)?;
    let ranked: Vec<Ranked> = result
        .ranked_ids
        .iter()
        .zip(&result.scores)
        .map(|(id, &score)| Ranked { id, score })
        .collect();
    print_json(&ranked)
}

#[derive(Debug, Serialize)]
struct PairSummary {
    rows: usize,
    samples: usize,
    mean: f64,
    std: f64,
    file: String,
}

fn pair_study(
    m: &EmbeddingMatrix,
    name: &str,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Option<PairSummary>> {
    if m.len() < 2 {
        return Ok(None);
    }
    let sims = pairwise_similarity_sample(m, &cfg.study())?;
    let hist = normalized_histogram(&sims, cfg.bins, DEFAULT_RANGE)?;
    let file = format!("pairs_{name}.csv");
    write_text(&out.join(&file), &hist.to_csv())?;
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(Some(PairSummary {
        rows: m.len(),
        samples: sims.len(),
        mean,
        std: var.sqrt(),
        file,
    }))
}

#[derive(Debug, Serialize)]
struct GapSummary {
    mean_target_sim: f64,
    mean_nontarget_sim: f64,
    gap: f64,
    histogram_iou: f64,
    target_file: String,
    nontarget_file: String,
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut o = Overrides::default();
    a.cfg.apply(&mut o);
    o.set("sample_pairs", a.sample_pairs)
        .set("nontargets_per_query", a.nontargets_per_query)
        .set("bins", a.bins);
    let cfg = RunConfig::load(a.cfg.config.as_deref(), o.into_map())?;
    let bundle = open_bundle(&a.bundle)?;
    let (mode, params) = resolve_model(cfg.mode, a.checkpoint.as_deref(), bundle.dim())?;
    let val = bundle.align_split(Split::Val)?;
    let combined_rows: Array2<f32> = combine_queries(&val, params.as_ref(), mode)?;
    let query_ids = val.records.iter().map(|r| r.query_id.clone()).collect();
    let combined = EmbeddingMatrix::new(query_ids, combined_rows)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut pairs = serde_json::Map::new();
    for (name, m) in [
        ("gallery", &bundle.gallery),
        ("captions", &bundle.captions),
        ("combined", &combined),
    ] {
        if let Some(s) = pair_study(m, name, &cfg, &a.out)? {
            pairs.insert(name.into(), serde_json::to_value(s)?);
        }
    }

    let gap = similarity_gap(&combined, &bundle.val, &bundle.gallery, &cfg.study())?;
    let write_hist = |file: &str, h: &Histogram| write_text(&a.out.join(file), &h.to_csv());
    write_hist("gap_target.csv", &gap.histogram_target)?;
    write_hist("gap_nontarget.csv", &gap.histogram_nontarget)?;
    let report = json!({
        "mode": mode.as_str(),
        "study": cfg.study(),
        "pairwise": pairs,
        "gap": GapSummary {
            mean_target_sim: gap.mean_target_sim,
            mean_nontarget_sim: gap.mean_nontarget_sim,
            gap: gap.gap,
            histogram_iou: gap.histogram_iou,
            target_file: "gap_target.csv".into(),
            nontarget_file: "gap_nontarget.csv".into(),
        },
    });
    let text = serde_json::to_string_pretty(&report)?;
    write_text(&a.out.join("report.json"), &(text.clone() + "\n"))?;
    emit(&(text + "\n"))
}

#[derive(Debug, Deserialize)]
struct SizeRow {
    id: String,
    width: usize,
    height: usize,
}

pub fn preprocess_stats(a: PreprocessArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("target_ratio", a.target_ratio)
        .set("dim", a.dim)
        .set("interpolation", a.interpolation);
    let cfg = RunConfig::load(a.config.as_deref(), o.into_map())?;
    let pre = cfg.preprocess();
    require_file(&a.input, "size table")?;
    let mut reader = csv::Reader::from_path(&a.input)
        .with_context(|| format!("opening {}", a.input.display()))?;
    let rows = reader
        .deserialize::<SizeRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("parsing {}", a.input.display()))?;
    if let Some(r) = rows.iter().find(|r| r.width == 0 || r.height == 0) {
        return Err(cir_core::Error::InvalidMatrix(format!(
            "image {:?} has size {}x{}",
            r.id, r.width, r.height
        ))
        .into());
    }
    let dims: Vec<(usize, usize)> = rows.iter().map(|r| (r.width, r.height)).collect();
    let hist = aspect_histogram(&dims, a.bin_width, 1.0)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut w = csv::Writer::from_path(a.out.join("aspect_histogram.csv"))?;
    w.write_record(["bin_left", "bin_right", "count"])?;
    for (i, c) in hist.counts.iter().enumerate() {
        let (l, r) = hist.bin_edges(i);
        w.write_record([l.to_string(), r.to_string(), c.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(a.out.join("retained.csv"))?;
    let mut header = vec!["id", "width", "height", "aspect_ratio"];
    header.extend(Pipeline::ALL.iter().map(|p| p.as_str()));
    w.write_record(&header)?;
    let mut sums = [0.0f64; 3];
    for r in &rows {
        let mut rec = vec![
            r.id.clone(),
            r.width.to_string(),
            r.height.to_string(),
            aspect_ratio(r.width, r.height).to_string(),
        ];
        for (i, p) in Pipeline::ALL.iter().enumerate() {
            let f = retained_fraction(r.width, r.height, p.target_ratio(pre.target_ratio));
            sums[i] += f;
            rec.push(f.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let means: serde_json::Map<String, serde_json::Value> = Pipeline::ALL
        .iter()
        .zip(sums)
        .map(|(p, s)| (p.as_str().to_string(), json!(s / rows.len() as f64)))
        .collect();
    let summary = json!({
        "images": rows.len(),
        "target_ratio": pre.target_ratio,
        "bin_width": a.bin_width,
        "mean_retained_fraction": means,
        "files": ["aspect_histogram.csv", "retained.csv"],
    });
    let text = serde_json::to_string_pretty(&summary)?;
    write_text(&a.out.join("summary.json"), &(text.clone() + "\n"))?;
    emit(&(text + "\n"))
}
