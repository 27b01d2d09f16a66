use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hoi_core::ablation::{self, AblationRow, Variant};
use hoi_core::checkpoint::Checkpoint;
use hoi_core::config::{Config, ValidConfig};
use hoi_core::data::{audit_synthetic, generate_synthetic, AnnotationFile, Dataset, PredictionFile, Sample, SyntheticSpec};
use hoi_core::evaluation::{category_counts, category_flags, evaluate, pr_curve};
use hoi_core::featurizer::ImageBatch;
use hoi_core::inference::{detect, postprocess, PostprocessOptions};
use hoi_core::loss::TargetSet;
use hoi_core::trainer::Trainer;
use hoi_tensor::nn::Ctx;
use hoi_tensor::Graph;
use ndarray::Array2;
use serde::Serialize;

use crate::plots::{self, Series};
use crate::rundir::{self, write_json};
use crate::{AblateArgs, Cli, Command, ConfigArgs, EvalArgs, ExportAttnArgs, GenDataArgs, InferArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.run_root;
    match cli.command {
        Command::Train(a) => train(&root, a),
        Command::Eval(a) => eval(&root, a),
        Command::Infer(a) => infer(&root, a),
        Command::ExportAttn(a) => export_attn(&root, a),
        Command::GenData(a) => gen_data(a),
        Command::Ablate(a) => ablate(&root, a),
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    Config::load_with_overrides(args.config.as_deref(), &args.overrides).context("loading config")
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_label_space(config: &ValidConfig, data: &Dataset) -> Result<()> {
    let m = &config.model;
    ensure!(
        m.n_obj_classes == data.n_obj_classes() && m.n_action_classes == data.n_actions(),
        "model predicts {} object classes and {} actions but the data has {} and {}",
        m.n_obj_classes,
        m.n_action_classes,
        data.n_obj_classes(),
        data.n_actions()
    );
    Ok(())
}

fn train(root: &Path, a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut t = Trainer::resume(&ck)?;
            if !a.config.overrides.is_empty() || a.config.config.is_some() {
                // Only training settings may change on resume.
                let base = match &a.config.config {
                    Some(p) => Config::load(p)?,
                    None => t.config.to_config(),
                };
                let merged = base.with_overrides(&a.config.overrides)?;
                ensure!(merged.model == ck.config.model, "--resume cannot change the model section");
                t.config = merged.validate()?;
            }
            log::info!("resuming at epoch {}", t.progress.epoch);
            t
        }
        None => Trainer::new(load_config(&a.config)?.validate()?),
    };
    let data = load_dataset(&a.data)?;
    check_label_space(&trainer.config, &data)?;
    let eval_data = a.eval_data.as_deref().map(load_dataset).transpose()?;
    if let Some(ev) = &eval_data {
        check_label_space(&trainer.config, ev)?;
    }
    if let Some(path) = &a.init {
        let n = trainer.load_partial(&load_checkpoint(path)?);
        log::info!("initialized {n} parameters from {}", path.display());
    }

    let dir = rundir::create(root, "train", &trainer.config.to_config())?;
    log::info!("run directory {}", dir.display());
    let log_path = dir.join("metrics.jsonl");
    let log = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    trainer.set_log(Box::new(BufWriter::new(log)), a.log_steps);
    trainer.fit(&data, eval_data.as_ref(), Some(&dir))?;
    trainer.set_log(Box::new(std::io::sink()), false);

    let loss = Series { name: "loss".into(), points: trainer.history.iter().map(|r| (r.epoch as f64, r.loss)).collect() };
    plots::line_chart(&dir.join("loss.png"), "training loss", "epoch", "loss", &[loss])?;
    let mut map_series = vec![Series { name: "Full".into(), points: vec![] }];
    map_series.push(Series { name: "Rare".into(), points: vec![] });
    map_series.push(Series { name: "Non-Rare".into(), points: vec![] });
    for r in &trainer.history {
        if let Some(m) = &r.map {
            let x = r.epoch as f64;
            map_series[0].points.push((x, m.full));
            if let Some(v) = m.rare {
                map_series[1].points.push((x, v));
            }
            if let Some(v) = m.non_rare {
                map_series[2].points.push((x, v));
            }
        }
    }
    map_series.retain(|s| !s.points.is_empty());
    if !map_series.is_empty() {
        plots::line_chart(&dir.join("map.png"), "evaluation mAP", "epoch", "mAP", &map_series)?;
    }
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    predictions: &'a Path,
    annotations: &'a Path,
    rare_threshold: usize,
    #[serde(flatten)]
    report: hoi_core::evaluation::EvalReport,
}

fn eval(root: &Path, a: EvalArgs) -> Result<()> {
    let preds = PredictionFile::load(&a.predictions).with_context(|| format!("loading {}", a.predictions.display()))?;
    let ann = AnnotationFile::load(&a.annotations).with_context(|| format!("loading {}", a.annotations.display()))?;
    let train = match &a.train_annotations {
        Some(p) => AnnotationFile::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ann.clone(),
    };
    let gts = ann.gt_triplets();
    let ignore = ann.ignore_object_flags();
    let report = evaluate(&preds.detections, &gts, &category_counts(&train.gt_triplets()), a.rare_threshold, &ignore);
    println!("Full {:.4}  Rare {}  Non-Rare {}", report.full, fmt_opt(report.rare), fmt_opt(report.non_rare));

    let out = match &a.out {
        Some(p) => p.clone(),
        None => {
            let settings = serde_json::json!({
                "predictions": a.predictions, "annotations": a.annotations,
                "train_annotations": a.train_annotations, "rare_threshold": a.rare_threshold,
            });
            rundir::create(root, "eval", &settings)?.join("metrics.json")
        }
    };
    write_json(
        &out,
        &EvalOutput { predictions: &a.predictions, annotations: &a.annotations, rare_threshold: a.rare_threshold, report },
    )?;
    if let Some(plot) = &a.pr_plot {
        let series: Vec<Series> = category_flags(&preds.detections, &gts, &ignore)
            .into_iter()
            .map(|(cat, flags, n)| Series {
                name: format!("{} / {}", class_name(&ann, cat.0), action_name(&ann, cat.1)),
                points: pr_curve(&flags, n),
            })
            .collect();
        plots::pr_chart(plot, "precision-recall per category", &series)?;
    }
    println!("{}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn class_name(ann: &AnnotationFile, k: usize) -> String {
    ann.object_classes.get(k).cloned().unwrap_or_else(|| k.to_string())
}

fn action_name(ann: &AnnotationFile, j: usize) -> String {
    ann.actions.iter().find(|r| r.id == j).map_or_else(|| j.to_string(), |r| r.name.clone())
}

fn blank_sample(id: u64, image: image::RgbImage, n_actions: usize) -> Sample {
    Sample { image_id: id, image, targets: TargetSet::empty(n_actions) }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8())
}

#[derive(Serialize)]
struct ImageIndexEntry {
    id: u64,
    file: PathBuf,
}

fn infer(root: &Path, a: InferArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.restore_model()?;
    let n_actions = model.config.n_action_classes;
    let (samples, index): (Vec<Sample>, Vec<ImageIndexEntry>) = match (&a.images, &a.annotations) {
        (Some(dir), _) => {
            let files = png_files(dir)?;
            ensure!(!files.is_empty(), "no PNG images in {}", dir.display());
            let mut samples = Vec::new();
            let mut index = Vec::new();
            for (i, f) in files.into_iter().enumerate() {
                samples.push(blank_sample(i as u64, open_rgb(&f)?, n_actions));
                index.push(ImageIndexEntry { id: i as u64, file: f });
            }
            (samples, index)
        }
        (None, Some(ann)) => {
            let data = load_dataset(ann)?;
            let dir = ann.parent().unwrap_or(Path::new("."));
            let index =
                data.annotations.images.iter().map(|r| ImageIndexEntry { id: r.id, file: dir.join(&r.file) }).collect();
            (data.samples, index)
        }
        (None, None) => bail!("one of --images or --annotations is required"),
    };
    let opts = PostprocessOptions { score_threshold: a.threshold, background_argmax: a.background_argmax };
    let refs: Vec<&Sample> = samples.iter().collect();
    let dets = detect(&model, &refs, a.batch_size, &opts)?;
    let out = match &a.out {
        Some(p) => p.clone(),
        None => {
            let settings = serde_json::json!({
                "checkpoint": a.checkpoint, "images": a.images, "annotations": a.annotations,
                "threshold": a.threshold, "background_argmax": a.background_argmax,
            });
            let dir = rundir::create(root, "infer", &settings)?;
            write_json(&dir.join("image_index.json"), &index)?;
            dir.join("predictions.json")
        }
    };
    PredictionFile::new(dets).save(&out)?;
    println!("{}", out.display());
    Ok(())
}

/// Attention maps of one decoder: `heads × queries × H × W`.
#[derive(Serialize)]
struct AttentionMaps {
    feature_height: usize,
    feature_width: usize,
    n_heads: usize,
    n_queries: usize,
    instance: Vec<Vec<Vec<Vec<f64>>>>,
    interaction: Vec<Vec<Vec<Vec<f64>>>>,
}

fn reshape_heads(probs: &[Array2<f64>], h: usize, w: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    probs
        .iter()
        .map(|p| {
            p.rows()
                .into_iter()
                .map(|r| (0..h).map(|y| (0..w).map(|x| r[y * w + x]).collect()).collect())
                .collect()
        })
        .collect()
}

fn head_mean(probs: &[Array2<f64>], q: usize, h: usize, w: usize) -> Array2<f64> {
    let mut m = Array2::zeros((h, w));
    for p in probs {
        for (i, v) in p.row(q).iter().enumerate().take(h * w) {
            m[[i / w, i % w]] += v / probs.len() as f64;
        }
    }
    m
}

fn export_attn(root: &Path, a: ExportAttnArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.restore_model()?;
    let img = open_rgb(&a.image)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &ImageBatch::from_rgb(&[&img]), &mut Ctx::eval())?;
    let (h, w) = (out.feature_height, out.feature_width);
    let decoding = &out.images[0];
    let probs = |v| g.attention_probs(v).map(<[Array2<f64>]>::to_vec).context("final layer has no attention record");
    let inst = probs(decoding.attention.instance)?;
    let inter = probs(decoding.attention.interaction)?;
    let n_queries = inst[0].nrows();

    let queries = if a.queries.is_empty() {
        // Highest-scoring distinct queries of the final prediction set.
        let pred = decoding.final_set().values(&g);
        let cp = pred.class_probs.as_ref().context("class probabilities")?;
        let ap = pred.action_probs.as_ref().context("action probabilities")?;
        let n_fg = cp.ncols() - 1;
        let mut scored: Vec<(usize, f64)> = (0..n_queries)
            .map(|q| {
                let c = (0..n_fg).map(|k| cp[[q, k]]).fold(0.0, f64::max);
                let s = ap.row(q).iter().cloned().fold(0.0, f64::max);
                (q, c * s)
            })
            .collect();
        scored.sort_by(|x, y| y.1.total_cmp(&x.1));
        scored.into_iter().take(3).map(|(q, _)| q).collect()
    } else {
        a.queries.clone()
    };
    if let Some(&bad) = queries.iter().find(|&&q| q >= n_queries) {
        bail!("query {bad} out of range (model has {n_queries})");
    }

    let dir = match &a.out {
        Some(p) => {
            std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
            p.clone()
        }
        None => {
            let settings = serde_json::json!({ "checkpoint": a.checkpoint, "image": a.image, "queries": queries });
            rundir::create(root, "export-attn", &settings)?
        }
    };
    let maps = AttentionMaps {
        feature_height: h,
        feature_width: w,
        n_heads: inst.len(),
        n_queries,
        instance: reshape_heads(&inst, h, w),
        interaction: reshape_heads(&inter, h, w),
    };
    let mut f = BufWriter::new(File::create(dir.join("attention.json"))?);
    serde_json::to_writer(&mut f, &maps)?;
    f.flush()?;
    let dets = postprocess(&decoding.final_set().values(&g), img.width(), img.height(), &PostprocessOptions::default());
    write_json(&dir.join("detections.json"), &dets.iter().take(20).collect::<Vec<_>>())?;
    for &q in &queries {
        for (name, p) in [("instance", &inst), ("interaction", &inter)] {
            let overlay = plots::heatmap_overlay(&img, &head_mean(p, q, h, w), 0.55);
            let path = dir.join(format!("{name}_q{q:03}.png"));
            overlay.save(&path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    println!("{}", dir.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    set!(n_images, image_size, n_obj_classes, n_actions, max_pairs, skew, seed, first_id);
    let ds = generate_synthetic(&spec)?;
    let audit = audit_synthetic(&ds);
    ensure!(audit.mismatches.is_empty(), "generated labels fail the geometry audit: {:?}", audit.mismatches);
    let ann = ds.write(&a.out)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    write_json(&a.out.join("audit.json"), &audit)?;
    println!("{}", ann.display());
    Ok(())
}

fn ablate(root: &Path, a: AblateArgs) -> Result<()> {
    let base = load_config(&a.config)?.validate()?;
    ensure!(!a.seeds.is_empty(), "no seeds given");
    let train = load_dataset(&a.train_data)?;
    let test = load_dataset(&a.test_data)?;
    check_label_space(&base, &train)?;
    check_label_space(&base, &test)?;
    let dir = rundir::create(root, "ablate", &base.to_config())?;
    let mut rows_log = BufWriter::new(File::create(dir.join("rows.jsonl"))?);
    let mut rows: Vec<AblationRow> = Vec::new();
    for &seed in &a.seeds {
        for v in Variant::ALL {
            let r = ablation::run_variant(&base, v, seed, &train, &test)?;
            log::info!("{} seed {seed}: Full {:.4} ({:.0}s)", v.label(), r.full, r.seconds);
            serde_json::to_writer(&mut rows_log, &r)?;
            rows_log.write_all(b"\n")?;
            rows_log.flush()?;
            rows.push(r);
        }
    }
    let table = ablation::table(&rows);
    std::fs::write(dir.join("table.md"), &table)?;
    print!("{table}");
    println!("{}", dir.display());
    Ok(())
}
