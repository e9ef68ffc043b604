use std::path::{Path, PathBuf};

use clap::Args;
use msnet_core::checkpoint::{load_checkpoint, save_checkpoint};
use msnet_core::cssl::{checkpoint_path, pretrain as run_pretrain, Network};
use msnet_core::data::Dataset;
use msnet_core::gradsuite::run_suite;
use msnet_core::image::GrayImage;
use msnet_core::io::{create_dir_all, write_atomic};
use msnet_core::manifest::{read_manifest, Manifest};
use msnet_core::probe::{
    embed_dataset, evaluate, evaluate_embeddings, export_activation_map, export_embeddings, linear_probe, probe_metrics_csv,
    split_labeled, LinearProbe, FRACTIONS,
};
use msnet_core::saem::{fusion_ratios, write_fusion_ratios};
use msnet_core::ssp::{estimate_size, DetectorParams};
use msnet_core::synth::{default_class_specs, gen_dataset, Counts, SliceOptions};
use msnet_core::tensor::ParamStore;
use msnet_core::{Error, Result};

use crate::config::RunConfig;

const CLASSES_FILE: &str = "classes.txt";
const CONFIG_FILE: &str = "config.toml";

/// `config.toml` saved next to a checkpoint, used when `--config` is absent.
pub fn sidecar_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(CONFIG_FILE);
    p.is_file().then_some(p)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training samples over all classes.
    #[arg(long, default_value_t = 400)]
    pub train_total: usize,
    /// Largest-to-smallest class ratio of the training set (1 for balanced).
    #[arg(long, default_value_t = 12.0)]
    pub long_tail_ratio: f64,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Meters per pixel.
    #[arg(long, default_value_t = 1.0)]
    pub resolution: f64,
}

pub fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<u8> {
    let specs = default_class_specs();
    let opts = SliceOptions { image_size: a.image_size, resolution_m_per_px: a.resolution, ..SliceOptions::default() };
    if !(a.long_tail_ratio >= 1.0) {
        return Err(Error::Argument(format!("long-tail ratio must be at least 1, got {}", a.long_tail_ratio)));
    }
    let train = gen_dataset(&specs, &Counts::LongTail { total: a.train_total, ratio: a.long_tail_ratio }, &opts, cfg.seed, &a.out.join("train"))?;
    let test = gen_dataset(&specs, &Counts::PerClass(vec![a.test_per_class; specs.len()]), &opts, cfg.seed ^ 0x7e57, &a.out.join("test"))?;
    println!("wrote {} training and {} test slices under {}", train.len(), test.len(), a.out.display());
    Ok(0)
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Manifest whose images are measured.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub manifest: Option<PathBuf>,
    /// Single image to measure.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Meters per pixel of the input images.
    #[arg(long, default_value_t = 1.0)]
    pub resolution: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn extract_size(a: &ExtractArgs) -> Result<u8> {
    let items: Vec<(String, PathBuf)> = match (&a.manifest, &a.image) {
        (Some(m), _) => {
            let m = read_manifest(m, None)?;
            m.records.iter().map(|r| (r.path.clone(), m.resolve(r))).collect()
        }
        (None, Some(p)) => vec![(p.display().to_string(), p.clone())],
        (None, None) => return Err(Error::Argument("pass --manifest or --image".into())),
    };
    create_dir_all(&a.out)?;
    let params = DetectorParams::default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["path", "length_m", "width_m", "axis_angle_rad", "n_keypoints"]).map_err(csv_err)?;
    let mut failed = 0;
    for (name, path) in &items {
        let img = GrayImage::load(path)?.with_resolution(a.resolution)?;
        match estimate_size(&img, &params) {
            Ok((e, n)) => w
                .write_record([name.clone(), e.length_m.to_string(), e.width_m.to_string(), e.axis_angle_rad.to_string(), n.to_string()])
                .map_err(csv_err)?,
            Err(Error::DegenerateSize(msg)) => {
                log::warn!("{name}: {msg}");
                failed += 1;
                w.write_record([name.as_str(), "", "", "", "0"]).map_err(csv_err)?;
            }
            Err(e) => return Err(e),
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&a.out.join("sizes.csv"), &bytes)?;
    println!("measured {} of {} images", items.len() - failed, items.len());
    Ok(0)
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pretraining epochs [default: 30 desk, 300 with --full-scale].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint interval in epochs (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

fn build(cfg: &RunConfig) -> Result<(Network, ParamStore)> {
    Network::build(&cfg.network(), cfg.seed)
}

fn load_set(manifest: &Path, classes: Option<&[String]>, cfg: &RunConfig) -> Result<(Manifest, Dataset)> {
    let m = read_manifest(manifest, classes)?;
    let d = Dataset::load(&m, classes, cfg.input_size)?;
    Ok((m, d))
}

pub fn pretrain(a: &PretrainArgs, mut cfg: RunConfig) -> Result<u8> {
    if let Some(e) = a.epochs {
        cfg.pretrain_epochs = e;
    }
    if let Some(e) = a.checkpoint_every {
        cfg.checkpoint_every = e;
    }
    let pcfg = cfg.pretrain();
    pcfg.validate()?;
    let (net, mut store) = build(&cfg)?;
    let (_, data) = load_set(&a.manifest, None, &cfg)?;
    create_dir_all(&a.out)?;
    write_atomic(&a.out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    log::info!("pretraining on {} samples, {} parameters", data.len(), store.num_values());
    let outcome = run_pretrain(&net, &mut store, &data, &pcfg, Some(&a.out))?;
    write_fusion_ratios(&fusion_ratios(&net.encoder.blocks, &store), &a.out.join("fusion_ratios.csv"))?;
    if let Some(last) = outcome.metrics.last() {
        println!("epoch {}: mean loss {}", last.epoch, last.mean_loss);
    }
    println!("checkpoint: {}", checkpoint_path(&a.out).display());
    Ok(0)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Network, ParamStore)> {
    let (net, mut store) = build(cfg)?;
    load_checkpoint(&mut store, checkpoint)?;
    Ok((net, store))
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Pretrained checkpoint; a `config.toml` beside it is used when --config is absent.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Label fractions to probe.
    #[arg(long, value_delimiter = ',', default_values_t = FRACTIONS.to_vec())]
    pub fractions: Vec<f64>,
    /// Probe epochs [default: 50 desk, 200 with --full-scale].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also write `embeddings.tsv` for the test set.
    #[arg(long)]
    pub export_embeddings: bool,
}

fn fraction_tag(f: f64) -> String {
    format!("{:03}", (f * 100.0).round() as u32)
}

pub fn probe(a: &ProbeArgs, mut cfg: RunConfig) -> Result<u8> {
    if let Some(e) = a.epochs {
        cfg.probe_epochs = e;
    }
    let (net, store) = load_model(&cfg, &a.checkpoint)?;
    let (train_m, train) = load_set(&a.train_manifest, None, &cfg)?;
    let classes = train.class_names.clone();
    let (_, test) = load_set(&a.test_manifest, Some(&classes), &cfg)?;
    create_dir_all(&a.out)?;
    write_atomic(&a.out.join(CLASSES_FILE), format!("{}\n", classes.join("\n")).as_bytes())?;
    let train_emb = embed_dataset(&net.encoder, &store, &train)?;
    let test_emb = embed_dataset(&net.encoder, &store, &test)?;
    let before = store.fingerprint();
    let mut rows = Vec::new();
    for &f in &a.fractions {
        let sub = split_labeled(&train_m, &classes, f, cfg.seed)?;
        let keep: std::collections::HashSet<&str> = sub.records.iter().map(|r| r.path.as_str()).collect();
        let idx: Vec<usize> = (0..train.len()).filter(|&i| keep.contains(train.paths[i].as_str())).collect();
        let emb: Vec<Vec<f64>> = idx.iter().map(|&i| train_emb[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let head = linear_probe(&emb, &labels, &classes, &cfg.probe())?;
        let ev = evaluate_embeddings(&head, &test_emb, &test.labels)?;
        let tag = fraction_tag(f);
        write_atomic(&a.out.join(format!("confusion_{tag}.csv")), ev.confusion.to_csv().as_bytes())?;
        save_checkpoint(&head.store, &a.out.join(format!("probe_{tag}.msnc")))?;
        println!("fraction {f}: {} labeled, test accuracy {}", idx.len(), ev.accuracy);
        rows.push((f, ev.accuracy));
    }
    debug_assert_eq!(before, store.fingerprint());
    write_atomic(&a.out.join("metrics.csv"), probe_metrics_csv(&rows).as_bytes())?;
    if a.export_embeddings {
        export_embeddings(&net.encoder, &store, &test, &a.out.join("embeddings.tsv"))?;
    }
    Ok(0)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probe head written by `probe`; its directory must hold `classes.txt`.
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write activation maps for the first N samples.
    #[arg(long, default_value_t = 0)]
    pub activation_maps: usize,
    #[arg(long)]
    pub export_embeddings: bool,
}

fn load_probe(path: &Path, dim: usize) -> Result<LinearProbe> {
    let classes_path = path.parent().unwrap_or(Path::new(".")).join(CLASSES_FILE);
    let text = std::fs::read_to_string(&classes_path).map_err(|e| Error::Data(format!("cannot read {}: {e}", classes_path.display())))?;
    let classes: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
    let mut head = LinearProbe::new(dim, classes, 0)?;
    load_checkpoint(&mut head.store, path)?;
    Ok(head)
}

pub fn eval(a: &EvalArgs, cfg: &RunConfig) -> Result<u8> {
    let (net, store) = load_model(cfg, &a.checkpoint)?;
    let head = load_probe(&a.probe, net.encoder.embedding_dim())?;
    let (m, data) = load_set(&a.manifest, Some(&head.class_names), cfg)?;
    let ev = evaluate(&net.encoder, &store, &head, &data)?;
    create_dir_all(&a.out)?;
    write_atomic(&a.out.join("confusion.csv"), ev.confusion.to_csv().as_bytes())?;
    if a.export_embeddings {
        export_embeddings(&net.encoder, &store, &data, &a.out.join("embeddings.tsv"))?;
    }
    if a.activation_maps > 0 {
        let dir = a.out.join("activations");
        create_dir_all(&dir)?;
        for (i, (img, rec)) in data.images.iter().zip(&m.records).take(a.activation_maps).enumerate() {
            let stem = Path::new(&rec.path).file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
            export_activation_map(&net.encoder, &store, img, &dir.join(format!("{i:04}_{stem}.pgm")))?;
        }
    }
    println!("accuracy: {}", ev.accuracy);
    Ok(0)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<u8> {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (name, r) in run_suite(cfg.seed)? {
        println!("{name:<20} max_rel_error {:.3e}  checked {:>5}  kinks skipped {}", r.max_rel_error, r.checked, r.skipped_kinks);
        worst = worst.max(r.max_rel_error);
        ok &= r.passed();
    }
    println!("max relative error: {worst:.3e} ({})", if ok { "pass" } else { "FAIL" });
    Ok(if ok { 0 } else { 3 })
}

#[derive(Args, Debug)]
pub struct RatiosArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn report_ratios(a: &RatiosArgs, cfg: &RunConfig) -> Result<u8> {
    let (net, store) = load_model(cfg, &a.checkpoint)?;
    let rows = fusion_ratios(&net.encoder.blocks, &store);
    create_dir_all(&a.out)?;
    write_fusion_ratios(&rows, &a.out.join("fusion_ratios.csv"))?;
    for (name, alpha, beta, r) in &rows {
        println!("{name}: |alpha| {alpha:.4} |beta| {beta:.4} log ratio {r:.4}");
    }
    Ok(0)
}

