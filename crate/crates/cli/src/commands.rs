use std::path::{Path, PathBuf};

use hazefork::imaging::{ColorMap, Image, ScalarMap};
use hazefork::io::{self, TensorArchive};
use hazefork::metrics::{self, QualityScores};
use hazefork::multilevel::{AggregationWeights, MultilevelConfig};
use hazefork::net::{DehazeNet, NetworkSpec, Objective, TrainConfig, DEFAULT_GAMMA};
use hazefork::pipeline::{self, DehazeConfig};
use hazefork::regularize::{self, CgOptions, RegularizerParams};
use hazefork::synth::{self, DatasetManifest, SynthesisConfig};
use hazefork::{Error, Result};

use crate::config::{pick, FileConfig};
use crate::{Cli, Command, DehazeArgs, EvalArgs, OracleArgs, SynthArgs, TrainArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::Singular(_) | Error::State(_) => 1,
        _ => 2,
    }
}

struct Globals {
    seed: u64,
    file: FileConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    }
    let g = Globals {
        seed: pick(cli.seed, file.seed, 0),
        file,
    };
    match cli.command {
        Command::Synth(a) => synth_cmd(&g, a),
        Command::Train(a) => train_cmd(&g, a),
        Command::Dehaze(a) => dehaze_cmd(&g, a),
        Command::OracleDehaze(a) => oracle_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// `path`'s stem with `_tag.ext` in the same directory.
fn tagged(path: &Path, tag: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}_{tag}.{ext}"))
}

fn synth_cmd(g: &Globals, a: SynthArgs) -> Result<()> {
    let s = &g.file.synth;
    let defaults = SynthesisConfig::default();
    let config = SynthesisConfig {
        beta_min: pick(None, s.beta_min, defaults.beta_min),
        beta_max: pick(None, s.beta_max, defaults.beta_max),
        airlight_min: pick(None, s.airlight_min, defaults.airlight_min),
        airlight_max: pick(None, s.airlight_max, defaults.airlight_max),
        patch_size: pick(a.omega, g.file.omega, defaults.patch_size),
        variance_threshold: pick(a.threshold, s.threshold, defaults.variance_threshold),
        patches_per_image: a.patches_per_image.or(s.patches_per_image),
        seed: g.seed,
    };
    let manifest = DatasetManifest::load(&a.manifest)?;
    if manifest.entries.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no images", a.manifest.display())));
    }
    let out = synth::generate_samples(&manifest, &config)?;
    for e in &out.errors {
        log::warn!("record {} ({}): {}", e.source + 1, e.rgb.display(), e.error);
    }
    if out.scenes.is_empty() {
        return Err(Error::InvalidArgument("no manifest record could be used".into()));
    }
    let written = synth::write_dataset(&a.out, out.records())?;
    if written == 0 {
        log::warn!("no patch passed the variance gate; the dataset is empty");
    }
    println!(
        "images {} failed {} kept {} rejected {}",
        out.scenes.len(),
        out.errors.len(),
        out.kept(),
        out.rejected()
    );
    Ok(())
}

fn train_cmd(g: &Globals, a: TrainArgs) -> Result<()> {
    let t = &g.file.train;
    let samples = synth::read_dataset(&a.data)?;
    let mut spec = match a.spec.as_ref().or(t.spec.as_ref()) {
        Some(path) => NetworkSpec::load(path)?,
        None => NetworkSpec::default(),
    };
    if let Some(omega) = a.omega.or(g.file.omega) {
        spec.patch_size = omega;
    }
    spec.validate()?;
    let defaults = TrainConfig::default();
    let gamma = pick(a.gamma, t.gamma, DEFAULT_GAMMA);
    let loss = pick(a.loss, t.loss.clone(), "l1,l2,l3".to_string());
    let config = TrainConfig {
        learning_rate: pick(a.learning_rate, t.learning_rate, defaults.learning_rate),
        epochs: pick(a.epochs, t.epochs, defaults.epochs),
        batch_size: pick(a.batch_size, t.batch_size, defaults.batch_size),
        seed: g.seed,
        shuffle: true,
        objective: Objective::parse(&loss, gamma)?,
    };
    log::info!(
        "training on {} samples, objective {}, {} epochs",
        samples.len(),
        config.objective.label(),
        config.epochs
    );
    let (mut net, report) = hazefork::net::train(&samples, &spec, &config, |e| {
        log::info!("epoch {:>4}  loss {:.6}", e.epoch, e.terms.total);
    })?;
    ensure_parent(&a.out)?;
    net.to_archive().save(&a.out)?;
    spec.save(sibling(&a.out, ".spec.toml"))?;
    let log_path = a.log.unwrap_or_else(|| sibling(&a.out, ".loss.csv"));
    write_text(&log_path, &report.to_csv())?;
    println!("weights {} loss log {}", a.out.display(), log_path.display());
    Ok(())
}

fn load_network(weights: &Path, spec: Option<&Path>) -> Result<DehazeNet<f32>> {
    let sidecar = sibling(weights, ".spec.toml");
    let spec = match spec {
        Some(p) => NetworkSpec::load(p)?,
        None if sidecar.exists() => NetworkSpec::load(&sidecar)?,
        None => NetworkSpec::default(),
    };
    let mut net = DehazeNet::new(&spec, 0)?;
    net.load_archive(&TensorArchive::load(weights)?)?;
    Ok(net)
}

/// A colour map file, or a constant written `r,g,b`.
fn load_airlight(arg: &str, height: usize, width: usize) -> Result<ColorMap> {
    let parts: Vec<&str> = arg.split(',').collect();
    if parts.len() == 3 {
        if let Ok(v) = parts.iter().map(|p| p.trim().parse::<f32>()).collect::<std::result::Result<Vec<_>, _>>() {
            return ColorMap::filled(height, width, [v[0], v[1], v[2]]);
        }
    }
    io::load_image(arg)
}

fn dehaze_cmd(g: &Globals, a: DehazeArgs) -> Result<()> {
    let d = &g.file.dehaze;
    let hazy = io::load_image(&a.input)?;
    let (h, w) = hazy.dims();
    ensure_parent(&a.out)?;

    if let (Some(t_path), Some(a_arg)) = (&a.oracle_t, &a.oracle_a) {
        let t = io::load_scalar_map(t_path)?;
        let airlight = load_airlight(a_arg, h, w)?;
        let dehazed = pipeline::oracle_dehaze(&hazy, &t, &airlight)?;
        io::save_raster(&dehazed, &a.out)?;
        if a.emit_maps {
            emit_maps(&a.out, &hazy, &dehazed, &t, &airlight, None)?;
        }
        return Ok(());
    }

    let weights = a
        .weights
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--weights is required unless --oracle-t/--oracle-a are given".into()))?;
    let net = load_network(weights, a.spec.as_deref())?;
    if let Some(omega) = a.omega.or(g.file.omega) {
        if omega != net.patch_size() {
            return Err(Error::InvalidArgument(format!(
                "--omega {omega} does not match the network's {}px input",
                net.patch_size()
            )));
        }
    }
    let ml = MultilevelConfig::default();
    let cg = CgOptions::default();
    let config = DehazeConfig {
        multilevel: MultilevelConfig {
            variance_threshold: pick(a.threshold, d.threshold, ml.variance_threshold),
            stride_divisor: pick(a.stride_divisor, d.stride_divisor, ml.stride_divisor),
            weights: AggregationWeights {
                t: pick(a.t_weights, d.t_weights.clone(), Vec::new()),
                a: pick(a.a_weights, d.a_weights.clone(), Vec::new()),
            },
        },
        regularizer: RegularizerParams {
            lambda: pick(a.lambda, d.lambda, regularize::DEFAULT_LAMBDA),
            epsilon: pick(a.epsilon, d.epsilon, regularize::DEFAULT_EPSILON),
            cg: CgOptions {
                tolerance: pick(a.cg_tol, d.cg_tol, cg.tolerance),
                max_iterations: pick(a.max_iter, d.max_iter, cg.max_iterations),
                ..cg
            },
        },
    };
    let out = pipeline::dehaze(&hazy, &net, &config)?;
    io::save_raster(&out.dehazed, &a.out)?;
    let coverage = out.coverage();
    let covered = coverage.iter().filter(|&&m| m).count();
    println!(
        "levels {} covered {:.1}% output {}",
        out.levels,
        100.0 * covered as f64 / coverage.len() as f64,
        a.out.display()
    );
    if a.emit_maps {
        emit_maps(&a.out, &hazy, &out.dehazed, &out.t, &out.a, Some(&coverage))?;
    }
    Ok(())
}

fn emit_maps(out: &Path, hazy: &Image, dehazed: &Image, t: &ScalarMap, a: &ColorMap, mask: Option<&[bool]>) -> Result<()> {
    let (h, w) = hazy.dims();
    io::save_raster(t, tagged(out, "t", "png"))?;
    io::save_raster(a, tagged(out, "A", "png"))?;
    if let Some(mask) = mask {
        io::save_mask(mask, h, w, tagged(out, "mask", "png"))?;
    }
    let t_rgb = pipeline::map_to_image(t);
    let compare = pipeline::side_by_side(&[hazy, dehazed, &t_rgb, a])?;
    io::save_raster(&compare, tagged(out, "compare", "png"))
}

fn oracle_cmd(a: OracleArgs) -> Result<()> {
    let hazy = io::load_image(&a.hazy)?;
    let (h, w) = hazy.dims();
    let t = io::load_scalar_map(&a.t)?;
    let airlight = load_airlight(&a.a, h, w)?;
    let dehazed = pipeline::oracle_dehaze(&hazy, &t, &airlight)?;
    ensure_parent(&a.out)?;
    io::save_raster(&dehazed, &a.out)
}

#[derive(Debug, serde::Deserialize)]
struct PairRow {
    output: PathBuf,
    reference: PathBuf,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format {
        path: a.pairs.clone(),
        reason: e.to_string(),
    };
    let base = a.pairs.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&a.pairs)
        .map_err(fmt)?;
    let rows: Vec<PairRow> = reader.deserialize().collect::<std::result::Result<_, _>>().map_err(fmt)?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no pairs", a.pairs.display())));
    }

    let mut out = String::from("image,psnr,ssim,ciede2000,status\n");
    let mut ok: Vec<QualityScores> = Vec::new();
    let mut failed = 0;
    for row in &rows {
        let scored = io::load_image(a.outputs.join(&row.output))
            .and_then(|o| io::load_image(base.join(&row.reference)).map(|r| (o, r)))
            .and_then(|(o, r)| metrics::score(&o, &r));
        let name = row.output.display();
        match scored {
            Ok(s) => {
                out.push_str(&format!("{name},{},{},{},ok\n", s.psnr, s.ssim, s.ciede2000));
                ok.push(s);
            }
            Err(e) => {
                log::error!("{name}: {e}");
                out.push_str(&format!("{name},,,,error\n"));
                failed += 1;
            }
        }
    }
    if !ok.is_empty() {
        let n = ok.len() as f64;
        let mean = |f: fn(&QualityScores) -> f64| ok.iter().map(f).sum::<f64>() / n;
        out.push_str(&format!(
            "average,{},{},{},{}\n",
            mean(|s| s.psnr),
            mean(|s| s.ssim),
            mean(|s| s.ciede2000),
            if failed == 0 { "ok" } else { "partial" }
        ));
    }
    match &a.out {
        Some(path) => write_text(path, &out)?,
        None => print!("{out}"),
    }
    if failed > 0 {
        return Err(Error::InvalidArgument(format!("{failed} of {} pairs could not be scored", rows.len())));
    }
    Ok(())
}
