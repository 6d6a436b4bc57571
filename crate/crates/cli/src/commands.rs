use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use protonet_core::checkpoint::Checkpoint;
use protonet_core::data::{
    filter_convex, filter_luss, load_manifest, sample_episode, split_by_video, write_manifest, DataError, EpisodeSpec,
    LussFilter, Manifest, SampleRecord, SeedStream, SplitPair,
};
use protonet_core::encoder::{Archetype, Encoder};
use protonet_core::eval::{evaluate, format_class_breakdown, format_report, reports_to_jsonl, EvalConfig, EvalReport};
use protonet_core::explain::{gradcam, overlay, select_high_confidence, to_gray, ExplainError, Selected};
use protonet_core::head::compute_prototypes;
use protonet_core::train::fit;
use protonet_core::Tensor;
use serde::Serialize;

use crate::config::{first_mismatch, RunConfig};
use crate::loader::{build_dataset, frozen_dim, load_splits, TEST_MANIFEST, TRAIN_MANIFEST};

pub const CHECKPOINT: &str = "best.ckpt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

fn resolve(base: &Path, path: &str) -> String {
    let p = Path::new(path);
    if p.is_absolute() {
        path.to_string()
    } else {
        base.join(p).display().to_string()
    }
}

/// Per-class `(videos, frames)`.
fn class_counts(records: &[SampleRecord], way: usize) -> Vec<(usize, usize)> {
    let mut videos = vec![std::collections::BTreeSet::new(); way];
    let mut frames = vec![0; way];
    for r in records {
        videos[r.class_id].insert(r.video_id.as_str());
        frames[r.class_id] += 1;
    }
    videos.iter().map(|v| v.len()).zip(frames).collect()
}

/// Filters, regroups into scenario classes and splits by video.
pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let Some(manifest_path) = &cfg.data.manifest else {
        bail!("data.manifest is not set");
    };
    let source = load_manifest(manifest_path)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut records = source.records.clone();
    if cfg.data.convex_only {
        records = filter_convex(&records);
    }
    if cfg.data.luss_normal.is_some() || cfg.data.luss_covid.is_some() {
        let filter = LussFilter {
            normal_class: cfg.data.luss_normal.as_ref().and(source.class_id(&cfg.data.normal_class)),
            covid_class: cfg.data.luss_covid.as_ref().and(source.class_id(&cfg.scenario.positive)),
            normal_scores: cfg.data.luss_normal.iter().flatten().copied().collect(),
            covid_scores: cfg.data.luss_covid.iter().flatten().copied().collect(),
        };
        let (kept, report) = filter_luss(&records, &filter)?;
        println!(
            "luss filter: removed {} by score, {} without a score",
            report.removed_by_score, report.missing_luss
        );
        records = kept;
    }

    let grouping = cfg.scenario.grouping(&source.classes)?;
    let classes: Vec<String> =
        grouping.iter().flatten().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if classes.len() != cfg.scenario.ways {
        bail!(
            "{}-way scenario but the grouping yields {} classes ({})",
            cfg.scenario.ways,
            classes.len(),
            classes.join(", ")
        );
    }
    let remapped: Vec<SampleRecord> = records
        .into_iter()
        .filter_map(|r| {
            let name = grouping[r.class_id].as_ref()?;
            let class_id = classes.iter().position(|c| c == name).expect("grouped class is listed");
            Some(SampleRecord { image_path: resolve(&base, &r.image_path), class_id, ..r })
        })
        .collect();
    let totals = class_counts(&remapped, classes.len());
    if let Some(k) = totals.iter().position(|&(_, frames)| frames == 0) {
        return Err(DataError::Invalid(format!("class `{}` is empty after filtering", classes[k])).into());
    }

    let outcome = split_by_video(&remapped, cfg.data.train_fraction, cfg.seed)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
        println!("warning: {w}");
    }
    let SplitPair { train, test } = outcome.split;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let manifest = Manifest { classes: classes.clone(), records: Vec::new() };
    write_manifest(cfg.out.join(TRAIN_MANIFEST), &manifest.with_records(train.clone()))?;
    write_manifest(cfg.out.join(TEST_MANIFEST), &manifest.with_records(test.clone()))?;
    cfg.echo()?;

    let (tr, te) = (class_counts(&train, classes.len()), class_counts(&test, classes.len()));
    println!("{:<12} {:>12} {:>12} {:>12} {:>12}", "class", "train videos", "train frames", "test videos", "test frames");
    for (k, name) in classes.iter().enumerate() {
        println!("{name:<12} {:>12} {:>12} {:>12} {:>12}", tr[k].0, tr[k].1, te[k].0, te[k].1);
    }
    println!("wrote {} and {}", cfg.out.join(TRAIN_MANIFEST).display(), cfg.out.join(TEST_MANIFEST).display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    classes: &'a [String],
    samples: usize,
    ways: usize,
    shots: usize,
    query: usize,
    support_per_episode: usize,
    query_per_episode: usize,
    epochs_run: usize,
    best_epoch: usize,
    best_loss: f64,
    final_loss: Option<f64>,
    stop_reason: &'static str,
    checkpoint: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.echo()?;
    let (manifest, _) = load_splits(&cfg.out)?;
    let data = build_dataset(cfg, &manifest, cfg.data.augment)?;
    let tc = cfg.train_config();
    let encoder = Encoder::new(cfg.encoder_config(frozen_dim(cfg, &data)), cfg.seed)?;
    println!(
        "training {} on {} samples: {}-way {}-shot, {} support + {} query per episode",
        encoder.name(),
        data.len(),
        tc.ways,
        tc.shots,
        tc.ways * tc.shots,
        tc.ways * tc.query
    );

    let ckpt_path = cfg.out.join(CHECKPOINT);
    let mut save_error = None;
    let (_, history) = fit(encoder, &data, &tc, |best, record| {
        if save_error.is_none() {
            if let Err(e) = Checkpoint::new(best.clone(), cfg.seed).save(&ckpt_path) {
                save_error = Some(e);
            }
        }
        log::info!("epoch {}: new best, checkpoint written", record.epoch);
    })?;
    if let Some(e) = save_error {
        return Err(e).context("saving checkpoint");
    }

    write(&cfg.out.join("history.csv"), history.to_csv())?;
    let summary = TrainSummary {
        classes: &manifest.classes,
        samples: data.len(),
        ways: tc.ways,
        shots: tc.shots,
        query: tc.query,
        support_per_episode: tc.ways * tc.shots,
        query_per_episode: tc.ways * tc.query,
        epochs_run: history.epochs.len(),
        best_epoch: history.best_epoch,
        best_loss: history.best_loss,
        final_loss: history.epochs.last().map(|e| e.mean_loss),
        stop_reason: history.stop_reason.as_str(),
        checkpoint: ckpt_path.clone(),
    };
    write(&cfg.out.join("train_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    for e in &history.epochs {
        println!("epoch {:>2}  loss {:.6}  lr {:e}{}", e.epoch, e.mean_loss, e.lr, if e.improved { "  *" } else { "" });
    }
    println!(
        "{} after {} epochs; best epoch {} (loss {:.6}) saved to {}",
        history.stop_reason.as_str(),
        history.epochs.len(),
        history.best_epoch,
        history.best_loss,
        ckpt_path.display()
    );
    Ok(())
}

struct Loaded {
    encoder: Encoder,
    classes: Vec<String>,
    data: protonet_core::data::Dataset,
}

fn load_for_eval(cfg: &RunConfig, checkpoint: Option<&Path>, need_conv_maps: bool) -> Result<Loaded> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(CHECKPOINT));
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if need_conv_maps && ckpt.encoder.config.archetype != Archetype::ConvNet {
        return Err(ExplainError::NoConvMaps.into());
    }
    if ckpt.encoder.config.archetype != cfg.encoder.archetype {
        return Err(config_mismatch("archetype", &ckpt.encoder.config.archetype, &cfg.encoder.archetype));
    }
    let (_, manifest) = load_splits(&cfg.out)?;
    let data = build_dataset(cfg, &manifest, cfg.data.augment_test)?;
    let wanted = cfg.encoder_config(frozen_dim(cfg, &data));
    if let Some((field, have, want)) = first_mismatch(&ckpt.encoder.config, &wanted) {
        return Err(config_mismatch(field, &have, &want));
    }
    Ok(Loaded { encoder: ckpt.encoder, classes: manifest.classes, data })
}

fn config_mismatch(field: &str, checkpoint: &dyn std::fmt::Debug, config: &dyn std::fmt::Debug) -> anyhow::Error {
    anyhow!("checkpoint does not match config: field `{field}` is {checkpoint:?} in the checkpoint but {config:?} in the config")
}

fn positive_index(cfg: &RunConfig, classes: &[String]) -> usize {
    classes.iter().position(|c| *c == cfg.scenario.positive).unwrap_or_else(|| {
        log::warn!("positive class `{}` not present; reporting `{}`", cfg.scenario.positive, classes[0]);
        0
    })
}

fn eval_config(cfg: &RunConfig, shot: usize, episodes: usize) -> EvalConfig {
    EvalConfig {
        spec: EpisodeSpec { way: cfg.scenario.ways, shot, query: cfg.query() },
        episodes,
        seed: cfg.seed,
        distance: cfg.train.distance,
    }
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.echo()?;
    let Loaded { encoder, classes, data } = load_for_eval(cfg, checkpoint, false)?;
    let positive = positive_index(cfg, &classes);
    let model = cfg.eval.model_name.clone().unwrap_or_else(|| encoder.name().to_string());
    let mut reports = Vec::new();
    for shot in cfg.eval_shots() {
        let ec = eval_config(cfg, shot, cfg.eval.episodes);
        let (cm, _) = evaluate(&encoder, &data, &ec)?;
        let report = EvalReport::from_confusion(ec.spec.way, shot, &model, ec.episodes, classes.clone(), positive, cm)?;
        log::info!("{shot}-shot:\n{}", format_class_breakdown(&report));
        reports.push(report);
    }
    let table = format_report(&reports);
    write(&cfg.out.join("report.txt"), &table)?;
    write(&cfg.out.join("report.jsonl"), reports_to_jsonl(&reports)?)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct Artifact<'a> {
    #[serde(flatten)]
    selected: &'a Selected,
    explained_class: usize,
    class_name: &'a str,
    source_size: (usize, usize),
    size: (usize, usize),
    grid: Vec<&'a [f32]>,
}

fn gray_of(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c == 1 {
        return Ok(image.clone());
    }
    let mut out = vec![0.0f32; h * w];
    for ch in image.data().chunks(h * w) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v / c as f32;
        }
    }
    Ok(Tensor::new([1, h, w], out)?)
}

pub fn explain(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.echo()?;
    let Loaded { encoder, classes, data } = load_for_eval(cfg, checkpoint, true)?;
    let dir = cfg.out.join("explain");
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let ec = eval_config(cfg, cfg.train.shots, cfg.explain.episodes.unwrap_or(cfg.eval.episodes));
    let (_, predictions) = evaluate(&encoder, &data, &ec)?;
    let mut selected = select_high_confidence(&predictions, cfg.explain.threshold);
    if let Some(limit) = cfg.explain.limit {
        selected.truncate(limit);
    }
    if selected.is_empty() {
        println!("no queries selected at threshold {}; {} left empty", cfg.explain.threshold, dir.display());
        return Ok(());
    }

    let pools = data.class_pools();
    let seeds = SeedStream::new(ec.seed);
    let mut prototypes = BTreeMap::new();
    for (n, sel) in selected.iter().enumerate() {
        let p = &sel.prediction;
        if !prototypes.contains_key(&p.episode) {
            let episode = sample_episode(&pools, ec.spec, &mut seeds.stream(p.episode as u64))?;
            let support_idx: Vec<usize> = episode.support.iter().map(|s| s.index).collect();
            let emb = encoder.embed(&data.batch(&support_idx)?)?;
            let support: Vec<(&[f32], usize)> =
                episode.support.iter().enumerate().map(|(i, s)| (emb.row(i), s.class_id)).collect();
            prototypes.insert(p.episode, compute_prototypes(&support, ec.spec.way)?);
        }
        let image = data.sample(p.index);
        let map = gradcam(&encoder, image, p.predicted, &prototypes[&p.episode], ec.distance)?;
        let tag = serde_json::to_value(sel.tag)?;
        let stem = format!("{n:04}_{}_ep{}_i{}", tag.as_str().unwrap_or("selected"), p.episode, p.index);
        let png = dir.join(format!("{stem}.png"));
        overlay(&to_gray(&gray_of(image)?)?, &map, cfg.explain.alpha)?
            .save(&png)
            .with_context(|| format!("writing {}", png.display()))?;
        let artifact = Artifact {
            selected: sel,
            explained_class: p.predicted,
            class_name: &classes[p.predicted],
            source_size: map.source_size,
            size: map.size,
            grid: map.values.chunks(map.size.1).collect(),
        };
        write(&dir.join(format!("{stem}.json")), serde_json::to_string(&artifact)? + "\n")?;
    }
    let misclassified = selected.iter().filter(|s| !s.prediction.is_correct()).count();
    println!(
        "wrote {} saliency maps ({} confident-correct, {misclassified} misclassified) to {}",
        selected.len(),
        selected.len() - misclassified,
        dir.display()
    );
    Ok(())
}
