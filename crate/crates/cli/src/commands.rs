use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use splitsr_core::cost::{count_network, parameter_sweeps, render_sweeps};
use splitsr_core::eval::{evaluate, format_db, load_dataset, score, Degradation};
use splitsr_core::image_io::{read_png, write_png};
use splitsr_core::network::{Network, NetworkConfig, Preset};
use splitsr_core::trainer::{synthetic_dataset, train_with, write_loss_csv, TrainConfig};
use splitsr_core::upscale::{Model, Upscaler, UpscalerRegistry};
use splitsr_core::weights::{load_weights_file, save_weights_file};
use splitsr_core::zoom::{Scheduler, ZoomEngine, MODEL_SCALE};

use crate::service::{router, AppState};
use crate::{Cli, Command, ConfigSource, CostArgs, EvalArgs, ServeArgs, TrainArgs, UpscaleArgs};

pub fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Upscale(a) => upscale(&a, &mut out),
        Command::Cost(a) => cost(&a, &mut out),
        Command::Eval(a) => eval(&a, &mut out),
        Command::Train(a) => train(&a, &mut out),
        Command::Serve(a) => serve(&a),
    }
}

/// A built-in method by name, otherwise a weight file. The second value is
/// the network's fixed scale.
pub fn resolve_upscaler(spec: &str) -> Result<(Arc<dyn Upscaler>, Option<usize>)> {
    let registry = UpscalerRegistry::builtin();
    if let Ok(method) = registry.get(spec) {
        return Ok((method, None));
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!(
            "`{spec}` is neither a weight file nor a built-in method ({})",
            registry.names().join(", ")
        );
    }
    let net = load_weights_file(path).with_context(|| format!("loading {}", path.display()))?;
    let scale = net.scale();
    let name = path.file_stem().map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
    Ok((Arc::new(Model::new(name, Arc::new(net))), Some(scale)))
}

pub fn load_config(source: &ConfigSource) -> Result<NetworkConfig> {
    match (&source.config, &source.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            NetworkConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
        }
        (None, Some(name)) => Ok(name.parse::<Preset>()?.config()),
        (None, None) => Ok(NetworkConfig::latency()),
    }
}

/// Parses `HxW`.
pub fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("expected HxW, got `{text}`"))?;
    let (h, w): (usize, usize) = (
        h.trim().parse().with_context(|| format!("bad height in `{text}`"))?,
        w.trim().parse().with_context(|| format!("bad width in `{text}`"))?,
    );
    if h == 0 || w == 0 {
        bail!("input size must be positive, got `{text}`");
    }
    Ok((h, w))
}

fn upscale(a: &UpscaleArgs, out: &mut impl Write) -> Result<()> {
    let input = read_png(&a.input)?;
    let (method, fixed) = resolve_upscaler(&a.model)?;
    let scale = match (a.scale, fixed) {
        (Some(s), Some(f)) if s != f => bail!("the network upscales by {f}, not {s}"),
        (Some(s), _) => s,
        (None, Some(f)) => f,
        (None, None) => 4,
    };
    let sr = method.upscale(&input, scale)?;
    write_png(&sr, &a.output)?;
    let s = sr.shape();
    writeln!(out, "{} x{scale}: {}x{} -> {}", method.name(), s.w, s.h, a.output.display())?;
    if let Some(reference) = &a.reference {
        let hr = read_png(reference)?;
        let (p, q) = score(&sr, &hr, scale)?;
        writeln!(out, "psnr {} dB  ssim {q:.4}", format_db(p))?;
    }
    Ok(())
}

fn cost(a: &CostArgs, out: &mut impl Write) -> Result<()> {
    let config = load_config(&a.source)?;
    let (h, w) = parse_size(&a.input_size)?;
    let report = count_network(&Network::<f32>::build(&config, 0)?, h, w);
    if a.json {
        writeln!(out, "{}", report.to_json())?;
        return Ok(());
    }
    write!(out, "{}", report.to_table())?;
    if a.table {
        writeln!(out)?;
        write!(out, "{}", render_sweeps(&parameter_sweeps(&config)?))?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let (method, fixed) = resolve_upscaler(&a.model)?;
    if let Some(f) = fixed.filter(|&f| f != a.scale) {
        bail!("the network upscales by {f}, not {}", a.scale);
    }
    let dataset = load_dataset(&a.dataset, a.scale, Degradation::Bicubic)?;
    for (path, err) in &dataset.skipped {
        eprintln!("skipped {}: {err}", path.display());
    }
    let report = evaluate(method.as_ref(), &dataset.id, &dataset.pairs, a.scale, a.shave.unwrap_or(a.scale))?;
    if a.json {
        writeln!(out, "{}", report.to_json())?;
    } else {
        write!(out, "{}", report.to_table())?;
    }
    Ok(())
}

fn train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let config = load_config(&a.source)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        hr_patch: a.patch,
        steps: a.steps,
        decay_every: a.decay_every,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate(config.scale)?;
    let pairs = match &a.dataset {
        Some(dir) => {
            let ds = load_dataset(dir, config.scale, Degradation::Bicubic)?;
            for (path, err) in &ds.skipped {
                eprintln!("skipped {}: {err}", path.display());
            }
            ds.pairs
        }
        None => synthetic_dataset(a.synthetic_count, a.synthetic_size, config.scale, a.seed)?,
    };
    let mut net = Network::<f32>::build(&config, a.seed)?;
    writeln!(out, "training {} parameters on {} images for {} steps", net.param_count(), pairs.len(), cfg.steps)?;
    let trace = train_with(&mut net, &pairs, &cfg, |r| {
        if a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == cfg.steps) {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}", r.step, r.lr, r.loss);
        }
    })?;
    save_weights_file(&net, &a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| loss_path(&a.out));
    write_loss_csv(&trace, fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        writeln!(out, "loss {:.4} -> {:.4}", first.loss, last.loss)?;
    }
    writeln!(out, "wrote {} and {}", a.out.display(), csv.display())?;
    Ok(())
}

fn loss_path(weights: &Path) -> PathBuf {
    weights.with_extension("csv")
}

/// Every readable PNG in `dir`, keyed by file stem.
pub fn load_images(dir: &Path) -> Result<Scheduler> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut scheduler = Scheduler::new();
    let mut count = 0;
    for path in paths {
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        match read_png(&path) {
            Ok(img) => {
                scheduler.add_image(id, img)?;
                count += 1;
            }
            Err(e) => eprintln!("skipped {}: {e}", path.display()),
        }
    }
    if count == 0 {
        bail!("no readable PNG images in {}", dir.display());
    }
    Ok(scheduler)
}

fn serve(a: &ServeArgs) -> Result<()> {
    let (model, fixed) = resolve_upscaler(&a.model)?;
    if let Some(f) = fixed.filter(|&f| f != MODEL_SCALE) {
        bail!("the tile service needs a x{MODEL_SCALE} network, got x{f}");
    }
    let scheduler = load_images(&a.images)?;
    let engine = ZoomEngine::start(scheduler, Some(model), a.workers);
    let state = AppState::new(engine, a.ratings.clone());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
