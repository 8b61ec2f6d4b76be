//! The four subcommands. Each resolves its configuration, validates it
//! up front and writes its artifacts under the configured directories.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s2cp_core::image::GrayImage;
use s2cp_core::metrics::{default_thresholds, predict_mask, roc_csv, roc_sweep, EvalReport, MatchRule};
use s2cp_core::network::{Attention, Mode, ModelConfig};
use s2cp_core::spectral::{dataset_spectrum_profile, profile_divergence, PrmInit};
use s2cp_core::style::{Ranking, SsrConfig};
use s2cp_core::synth::{generate_domain_dataset, save_pgm, DatasetManifest, Depth, DomainStyle, SceneSpec, Split};
use s2cp_core::tensor::{AdamConfig, Checkpoint, Graph, Init, Tensor, Upsample};
use s2cp_core::train::{checkpoint_domains, fit, predict_images, RunFiles, TrainConfig, Trainer};
use s2cp_core::Model32;

use crate::config::{is_key, RunConfig};
use crate::CliError;

fn choice<T: Copy>(cfg: &RunConfig, key: &str, options: &[(&str, T)]) -> Result<T, CliError> {
    let v = cfg.raw(key);
    options.iter().find(|(name, _)| *name == v).map(|&(_, t)| t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        CliError::Config(format!("{key}: {v:?} is not one of {}", names.join(" | ")))
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Short dataset label: the manifest's directory name.
fn dataset_name(manifest: &Path) -> String {
    manifest
        .parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

pub fn model_config(cfg: &RunConfig) -> Result<ModelConfig, CliError> {
    let stages: usize = cfg.get("model.stages")?;
    let size: usize = cfg.get("model.input_size")?;
    let mc = ModelConfig {
        stages,
        base_channels: cfg.get("model.base_channels")?,
        in_channels: 1,
        input_size: (size, size),
        prm: vec![cfg.get("model.prm")?; stages],
        prm_init: choice(
            cfg,
            "model.prm_init",
            &[("kaiming", PrmInit::Kaiming), ("zero", PrmInit::Zero), ("zero_last", PrmInit::ZeroLast)],
        )?,
        oam: cfg.get("model.oam")?,
        attention: choice(
            cfg,
            "model.attention",
            &[("orthogonal", Attention::Orthogonal), ("global_pool", Attention::GlobalPool)],
        )?,
        oam_init: choice(cfg, "model.oam_init", &[("kaiming", Init::Kaiming), ("zero", Init::Zero)])?,
        ssr: cfg.get("model.ssr")?,
        ssr_stages: cfg.get_list("model.ssr_stages")?,
        ssr_domains: 2,
        ssr_config: SsrConfig {
            tau: cfg.get("model.tau")?,
            lambda: cfg.get("model.lambda")?,
            alpha: cfg.get("model.alpha")?,
            ranking: choice(cfg, "model.ranking", &[("sigma", Ranking::Sigma), ("mu", Ranking::Mu)])?,
        },
        upsample: choice(
            cfg,
            "model.upsample",
            &[("bilinear", Upsample::Bilinear), ("nearest", Upsample::Nearest)],
        )?,
    };
    mc.validate()?;
    Ok(mc)
}

fn match_rule(cfg: &RunConfig) -> Result<MatchRule, CliError> {
    choice(
        cfg,
        "eval.match_rule",
        &[("neighborhood", MatchRule::Neighborhood), ("greedy", MatchRule::GreedyComponent)],
    )
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let tc = TrainConfig {
        epochs: cfg.get("train.epochs")?,
        batch: cfg.get("train.batch")?,
        adam: AdamConfig {
            lr: cfg.get("train.lr")?,
            ..AdamConfig::default()
        },
        seed: cfg.get("train.seed")?,
        threshold: cfg.get("eval.threshold")?,
        match_radius: cfg.get("eval.match_radius")?,
        rule: match_rule(cfg)?,
    };
    tc.validate()?;
    Ok(tc)
}

fn scene_spec(cfg: &RunConfig) -> Result<SceneSpec, CliError> {
    let spec = SceneSpec {
        size: cfg.get("data.size")?,
        targets: cfg.get_pair("data.targets")?,
        diameter: cfg.get_pair("data.diameter")?,
        scr: cfg.get_pair("data.scr")?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Stock styles for the configured preset with `style.*` overrides applied.
pub fn domain_styles(cfg: &RunConfig) -> Result<Vec<DomainStyle>, CliError> {
    let mut styles = match cfg.raw("data.preset") {
        "default" => cfg
            .get_list::<usize>("data.domains")?
            .into_iter()
            .map(DomainStyle::preset)
            .collect(),
        "phase_pair" => DomainStyle::phase_pair(cfg.get_pair("data.phase_jitter_pair")?).to_vec(),
        other => {
            return Err(CliError::Config(format!(
                "data.preset: {other:?} is not one of default | phase_pair"
            )))
        }
    };
    if styles.is_empty() {
        return Err(CliError::Config("data.domains: no domains listed".into()));
    }
    for s in &mut styles {
        let fields: [(&str, &mut f64); 7] = [
            ("beta", &mut s.beta),
            ("mean", &mut s.mean),
            ("spread", &mut s.spread),
            ("clutter_density", &mut s.clutter_density),
            ("clutter_scale", &mut s.clutter_scale),
            ("noise_sigma", &mut s.noise_sigma),
            ("phase_jitter", &mut s.phase_jitter),
        ];
        for (name, slot) in fields {
            if let Some(v) = cfg.get_opt::<f64>(&format!("style.{name}"))? {
                *slot = v;
            }
        }
        // core messages start with the offending field name
        s.validate().map_err(|e| {
            let msg = e.to_string();
            let field = msg.split_whitespace().find(|w| is_key(&format!("style.{w}")));
            match field {
                Some(f) => CliError::Config(format!("style.{f}: {msg}")),
                None => CliError::Config(msg),
            }
        })?;
    }
    Ok(styles)
}

/// Writes one dataset per domain under `data.out`; returns the manifest paths.
pub fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let styles = domain_styles(cfg)?;
    let spec = scene_spec(cfg)?;
    let count: usize = cfg.get("data.count")?;
    let seed: u64 = cfg.get("data.seed")?;
    let root = PathBuf::from(cfg.raw("data.out"));
    create_dir(&root)?;
    let mut out = Vec::new();
    for style in &styles {
        let m = generate_domain_dataset(style, &spec, count, seed, &root)?;
        let (train, val) = m.counts_per_domain()[&style.id];
        log::info!("domain {}: {train} train / {val} val images in {}", style.id, m.root.display());
        out.push(m.root.join(s2cp_core::synth::MANIFEST_FILE));
    }
    cfg.write_resolved(&root)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub files: RunFiles,
    pub best_iou: f64,
    pub domains: Vec<usize>,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let mut cfg = cfg.clone();
    let manifests: Vec<PathBuf> = cfg.get_list("train.manifests")?;
    if manifests.is_empty() {
        return Err(CliError::Config("train.manifests: no source manifests listed".into()));
    }
    let (mut train_set, mut val_set) = (Vec::new(), Vec::new());
    let mut domains = Vec::new();
    for path in &manifests {
        let m = DatasetManifest::load(path)?;
        if m.entries.is_empty() {
            return Err(CliError::Config(format!("{}: empty manifest", path.display())));
        }
        domains.extend(m.domains());
        train_set.extend(m.samples(Some(Split::Train))?);
        val_set.extend(m.samples(Some(Split::Val))?);
    }
    domains.sort_unstable();
    domains.dedup();

    let mut mc = model_config(&cfg)?;
    if mc.ssr && domains.len() < 2 {
        log::warn!("single source domain: style recomposition disabled");
        mc.ssr = false;
        cfg.set("model.ssr", "false")?;
    }
    mc.ssr_domains = domains.len();
    let (h, w) = mc.input_size;
    if let Some(s) = train_set.iter().chain(&val_set).find(|s| (s.image.height, s.image.width) != (h, w)) {
        return Err(CliError::Config(format!(
            "model.input_size: model expects {h}x{w}, data has {}x{}",
            s.image.height, s.image.width
        )));
    }
    let tc = train_config(&cfg)?;
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    cfg.write_resolved(&dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let model = Model32::new(mc, &mut rng)?;
    log::info!(
        "training on domains {domains:?}: {} train / {} val images, {} parameters",
        train_set.len(),
        val_set.len(),
        model.store.numel()
    );
    let mut trainer = Trainer::new(model, tc, &domains)?;
    let files = RunFiles::in_dir(&dir);
    if cfg.get::<bool>("train.resume")? {
        trainer.restore(&Checkpoint::load(&files.last)?)?;
        log::info!("resumed after epoch {}", trainer.epoch);
    }
    fit(&mut trainer, &train_set, &val_set, &files)?;
    Ok(TrainOutcome {
        files,
        best_iou: trainer.best_iou,
        domains,
    })
}

fn parse_split(cfg: &RunConfig) -> Result<Option<Split>, CliError> {
    choice(
        cfg,
        "eval.split",
        &[("val", Some(Split::Val)), ("train", Some(Split::Train)), ("all", None)],
    )
}

/// Model rebuilt from the run configuration and a checkpoint's source domains.
fn load_model(cfg: &RunConfig, ck: &Checkpoint, train_domains: &[usize]) -> Result<Model32, CliError> {
    let mut mc = model_config(cfg)?;
    if train_domains.len() < 2 {
        mc.ssr = false;
    }
    mc.ssr_domains = train_domains.len().max(1);
    let mut model = Model32::new(mc, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_checkpoint(ck)?;
    Ok(model)
}

/// Writes `<name>_stage{l}.pgm` heatmaps of every decoder output, averaged
/// over channels and min-max normalized per map.
fn dump_activations(model: &Model32, images: &[GrayImage], names: &[String], dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    let mut model = model.clone();
    for (img, name) in images.iter().zip(names) {
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor::<f32>())?;
        let pass = model.forward(&mut g, x, Mode::Eval, None)?;
        for (i, &d) in pass.decoded.iter().enumerate() {
            let t: &Tensor<f32> = g.value(d);
            let [_, c, h, w] = t.dims();
            let mut pixels = vec![0.0; h * w];
            for ch in 0..c {
                for (p, &v) in pixels.iter_mut().zip(t.plane(0, ch)) {
                    *p += v as f64 / c as f64;
                }
            }
            let map = GrayImage::new(h, w, pixels)?.normalized();
            save_pgm(&map, dir.join(format!("{name}_stage{}.pgm", i + 1)), Depth::Eight)?;
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let manifest_path = PathBuf::from(cfg.raw("eval.manifest"));
    if cfg.raw("eval.manifest").is_empty() {
        return Err(CliError::Config("eval.manifest: no target manifest given".into()));
    }
    let manifest = DatasetManifest::load(&manifest_path)?;
    let split = parse_split(cfg)?;
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .collect();
    let samples = manifest.samples(split)?;
    if samples.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no entries in split {}",
            manifest_path.display(),
            cfg.raw("eval.split")
        )));
    }
    let name = match cfg.raw("eval.name") {
        "" => dataset_name(&manifest_path),
        n => n.to_string(),
    };
    let threshold: f64 = cfg.get("eval.threshold")?;
    let radius: f64 = cfg.get("eval.match_radius")?;
    let rule = match_rule(cfg)?;
    let steps: usize = cfg.get("eval.roc_steps")?;
    if steps == 0 {
        return Err(CliError::Config("eval.roc_steps: must be at least 1".into()));
    }
    let dir = cfg.out_dir();
    create_dir(&dir)?;

    let mut model = None;
    let probs: Vec<GrayImage> = if cfg.get::<bool>("eval.oracle")? {
        samples.iter().map(|s| s.mask.to_image()).collect()
    } else {
        let ck_path = match cfg.raw("eval.checkpoint") {
            "" => RunFiles::in_dir(&dir).best,
            p => PathBuf::from(p),
        };
        let ck = Checkpoint::load(&ck_path)?;
        let trained = checkpoint_domains(&ck).ok_or_else(|| {
            CliError::Config(format!("{}: checkpoint does not list its training domains", ck_path.display()))
        })?;
        let seen: Vec<usize> = manifest.domains().into_iter().filter(|d| trained.contains(d)).collect();
        if !seen.is_empty() && !cfg.get::<bool>("eval.allow_seen_domains")? {
            return Err(CliError::Guard(format!(
                "target domains {seen:?} were used for training (set eval.allow_seen_domains = true to permit)"
            )));
        }
        let m = load_model(cfg, &ck, &trained)?;
        let images: Vec<GrayImage> = samples.iter().map(|s| s.image.clone()).collect();
        let p = predict_images(&m, &images)?;
        model = Some(m);
        p
    };
    cfg.write_resolved(&dir)?;

    let preds = probs.iter().map(|p| predict_mask(p, threshold)).collect::<Result<Vec<_>, _>>()?;
    let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = EvalReport::compute(&name, &preds, &gts, radius, rule)?;
    write(
        &dir.join("eval.csv"),
        &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
    )?;
    let roc = roc_sweep(&probs, &gts, &default_thresholds(steps), radius, rule)?;
    write(&dir.join("roc.csv"), &roc_csv(&roc))?;
    log::info!(
        "{name}: IoU {:.4}, F1 {:.4}, Pd {:.4}, Fa {:.2}e-6",
        report.iou,
        report.f1,
        report.pd,
        report.fa
    );

    if cfg.get::<bool>("eval.dump_activations")? {
        match &model {
            Some(m) => {
                let images: Vec<GrayImage> = samples.iter().map(|s| s.image.clone()).collect();
                let names: Vec<String> = entries
                    .iter()
                    .map(|e| e.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
                    .collect();
                dump_activations(m, &images, &names, &dir.join("activations"))?;
            }
            None => log::warn!("oracle evaluation has no activations to dump"),
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub a: String,
    pub b: String,
    pub magnitude: f64,
    pub congruency: f64,
}

pub fn spectra(cfg: &RunConfig) -> Result<Vec<Divergence>, CliError> {
    let manifests: Vec<PathBuf> = cfg.get_list("spectra.manifests")?;
    if manifests.is_empty() {
        return Err(CliError::Config("spectra.manifests: no manifests listed".into()));
    }
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let mut profiles = Vec::new();
    for (i, path) in manifests.iter().enumerate() {
        let m = DatasetManifest::load(path)?;
        if m.entries.is_empty() {
            return Err(CliError::Config(format!("{}: empty manifest", path.display())));
        }
        let profile = dataset_spectrum_profile(&m.images(None)?)?;
        let name = format!("{i}-{}", dataset_name(path));
        write(&dir.join(format!("spectrum_{name}.csv")), &profile.to_csv())?;
        profiles.push((name, profile));
    }
    let mut rows = Vec::new();
    let mut csv = String::from("dataset_a,dataset_b,magnitude_divergence,congruency_divergence\n");
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let (mag, cong) = profile_divergence(&profiles[i].1, &profiles[j].1)?;
            csv.push_str(&format!("{},{},{mag:.6},{cong:.6}\n", profiles[i].0, profiles[j].0));
            rows.push(Divergence {
                a: profiles[i].0.clone(),
                b: profiles[j].0.clone(),
                magnitude: mag,
                congruency: cong,
            });
        }
    }
    write(&dir.join("spectra_divergence.csv"), &csv)?;
    cfg.write_resolved(&dir)?;
    Ok(rows)
}
