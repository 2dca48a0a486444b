use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use noiseprint::camera::{self, Dataset, DatasetConfig, Split};
use noiseprint::localize::{self, LocalizeConfig};
use noiseprint::metrics::{self, EvalConfig};
use noiseprint::net::{self, ExtractorParams, Mode, NetConfig, PretrainConfig};
use noiseprint::raster::{self, write_atomic};
use noiseprint::rng::derive_seed;
use noiseprint::source_id::{self, IdentifyConfig};
use noiseprint::train::{self, TrainConfig, TrainLogEntry};

use crate::{Cli, Command, SplitArg};

/// Single-line JSON description of a failure, for stderr.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<noiseprint::Error>())
        .map(kind_of)
        .unwrap_or("runtime");
    let mut message = String::new();
    for c in e.chain() {
        let part = c.to_string();
        if message.contains(&part) {
            continue;
        }
        if !message.is_empty() {
            message.push_str(": ");
        }
        message.push_str(&part);
    }
    let message = message.replace('\n', " ");
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn kind_of(e: &noiseprint::Error) -> &'static str {
    use noiseprint::Error::*;
    match e {
        Io { .. } => "io",
        Image { .. } | UnsupportedFormat { .. } | BadMagic { .. } | Version(_) => "format",
        Length { .. } | Shape(_) | Channels { .. } | OutOfBounds { .. } => "shape",
        Config(_) => "config",
        InsufficientData(_) => "insufficient_data",
        Diverged { .. } => "diverged",
        Numerical(_) => "numerical",
        Json(_) => "json",
    }
}

/// Resolved configuration written next to every run's outputs.
#[derive(Serialize)]
struct RunConfig<'a, T> {
    command: &'a str,
    args: Vec<String>,
    threads: Option<usize>,
    params: &'a T,
}

struct Ctx {
    force: bool,
    seed: Option<u64>,
    config: Option<PathBuf>,
    threads: Option<usize>,
}

impl Ctx {
    fn load<T: DeserializeOwned + Default>(&self) -> Result<T> {
        let Some(path) = &self.config else {
            return Ok(T::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(p) = v.get_mut("params") {
            v = p.take();
        }
        serde_json::from_value(v).with_context(|| format!("config {}", path.display()))
    }

    fn echo<T: Serialize>(&self, command: &str, params: &T, path: &Path) -> Result<()> {
        let run = RunConfig {
            command,
            args: std::env::args().skip(1).collect(),
            threads: self.threads,
            params,
        };
        write_atomic(path, serde_json::to_string_pretty(&run)?.as_bytes())?;
        Ok(())
    }

    /// Refuses to clobber an existing file unless `--force`.
    fn output(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            bail!("output {} exists (use --force)", path.display());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(())
    }

    fn output_dir(&self, dir: &Path) -> Result<()> {
        let nonempty = dir.is_dir()
            && fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .next()
                .is_some();
        if nonempty && !self.force {
            bail!("output directory {} is not empty (use --force)", dir.display());
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(())
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let ctx = Ctx {
        force: cli.force,
        seed: cli.seed,
        config: cli.config,
        threads: cli.threads,
    };
    match cli.command {
        Command::Simulate { models, images, size, out } => simulate(&ctx, models, images, size, &out),
        Command::Pretrain { data, net_depth, net_width, iters, out } => {
            pretrain(&ctx, &data, net_depth, net_width, iters, &out)
        }
        Command::Train {
            data,
            init,
            net_depth,
            net_width,
            lambda,
            iters,
            lr,
            groups,
            members,
            patch,
            tau,
            checkpoint_every,
            out,
        } => {
            let mut p: TrainParams = ctx.load()?;
            override_net(&mut p.net, net_depth, net_width);
            let t = &mut p.train;
            t.lambda = lambda.unwrap_or(t.lambda);
            t.iterations = iters.unwrap_or(t.iterations);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            t.groups = groups.unwrap_or(t.groups);
            t.members = members.unwrap_or(t.members);
            t.patch = patch.unwrap_or(t.patch);
            t.tau = tau.or(t.tau);
            t.checkpoint_every = checkpoint_every.unwrap_or(t.checkpoint_every);
            t.seed = ctx.seed.unwrap_or(t.seed);
            train_cmd(&ctx, &data, init.as_deref(), p, &out)
        }
        Command::Extract { model, image, out, png } => extract(&ctx, &model, &image, &out, png),
        Command::Localize { model, image, out, png, window, stride, dims } => {
            let mut cfg: LocalizeConfig = ctx.load()?;
            cfg.window = window.unwrap_or(cfg.window);
            cfg.stride = stride.unwrap_or(cfg.stride);
            cfg.dims = dims.unwrap_or(cfg.dims);
            cfg.seed = ctx.seed.unwrap_or(cfg.seed);
            localize_cmd(&ctx, &model, &image, &out, png.as_deref(), &cfg)
        }
        Command::Evaluate { pred, gt, report, csv, radius } => {
            let mut cfg: EvalConfig = ctx.load()?;
            cfg.exclusion_radius = radius.unwrap_or(cfg.exclusion_radius);
            evaluate(&ctx, &pred, &gt, &report, csv.as_deref(), &cfg)
        }
        Command::Identify { model, data, crop, reference_images, report } => {
            let mut cfg: IdentifyConfig = ctx.load()?;
            cfg.crop = crop.unwrap_or(cfg.crop);
            cfg.reference_images = reference_images.or(cfg.reference_images);
            identify(&ctx, &model, &data, &report, &cfg)
        }
        Command::Splice { data, count, split, out } => {
            let mut p: SpliceParams = ctx.load()?;
            p.count = count.unwrap_or(p.count);
            if let Some(s) = split {
                p.split = match s {
                    SplitArg::Train => Split::Train,
                    SplitArg::Val => Split::Val,
                    SplitArg::Test => Split::Test,
                };
            }
            p.seed = ctx.seed.unwrap_or(p.seed);
            splice_cmd(&ctx, &data, &out, &p)
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NetShape {
    depth: usize,
    width: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        let d = NetConfig::default();
        Self {
            depth: d.depth,
            width: d.width,
        }
    }
}

fn override_net(net: &mut NetShape, depth: Option<usize>, width: Option<usize>) {
    net.depth = depth.unwrap_or(net.depth);
    net.width = width.unwrap_or(net.width);
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateParams {
    models: usize,
    images: usize,
    size: usize,
    seed: u64,
}

impl Default for SimulateParams {
    fn default() -> Self {
        Self {
            models: 4,
            images: 60,
            size: 256,
            seed: 0,
        }
    }
}

fn simulate(ctx: &Ctx, models: Option<usize>, images: Option<usize>, size: Option<usize>, out: &Path) -> Result<()> {
    let mut p: SimulateParams = ctx.load()?;
    p.models = models.unwrap_or(p.models);
    p.images = images.unwrap_or(p.images);
    p.size = size.unwrap_or(p.size);
    p.seed = ctx.seed.unwrap_or(p.seed);
    if p.models < 2 {
        return Err(noiseprint::Error::Config(format!("need at least 2 camera models, got {}", p.models)).into());
    }
    if p.images == 0 {
        return Err(noiseprint::Error::Config("need at least 1 image per model".into()).into());
    }
    ctx.output_dir(out)?;
    let manifest = camera::build_dataset(
        &DatasetConfig {
            n_models: p.models,
            images_per_model: p.images,
            size: p.size,
            seed: p.seed,
        },
        out,
    )?;
    ctx.echo("simulate", &p, &out.join("run_config.json"))?;
    eprintln!("wrote {} images to {}", manifest.entries.len(), out.display());
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainParams {
    net: NetShape,
    pretrain: PretrainConfig,
}

#[derive(Serialize)]
struct PretrainLogEntry {
    iter: usize,
    loss: f64,
}

fn pretrain(
    ctx: &Ctx,
    data: &Path,
    depth: Option<usize>,
    width: Option<usize>,
    iters: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut p: PretrainParams = ctx.load()?;
    override_net(&mut p.net, depth, width);
    p.pretrain.iterations = iters.unwrap_or(p.pretrain.iterations);
    p.pretrain.seed = ctx.seed.unwrap_or(p.pretrain.seed);
    let net_cfg = NetConfig::new(p.net.depth, p.net.width);
    net_cfg.validate(p.pretrain.patch)?;
    let dataset = Dataset::open(data)?;
    ctx.output(out)?;
    let images: Vec<_> = dataset
        .load_split(Split::Train)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    let mut params = ExtractorParams::<f32>::random(net_cfg, derive_seed(p.pretrain.seed, "init", 0))?;
    let losses = net::pretrain(&mut params, &images, &p.pretrain)?;
    net::save_params(&params.with_mode(Mode::Eval), out)?;
    let log = losses
        .iter()
        .enumerate()
        .map(|(iter, &loss)| serde_json::to_string(&PretrainLogEntry { iter, loss }))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_log(&sibling(out, ".log.jsonl"), &log)?;
    ctx.echo("pretrain", &p, &sibling(out, ".config.json"))?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("pretrain loss {first:.6} -> {last:.6}");
    }
    Ok(())
}

fn write_log(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainParams {
    net: NetShape,
    train: TrainConfig,
}

fn train_cmd(ctx: &Ctx, data: &Path, init: Option<&Path>, p: TrainParams, out: &Path) -> Result<()> {
    let net_cfg = NetConfig::new(p.net.depth, p.net.width);
    let params = match init {
        Some(path) => {
            let loaded = net::load_params(path)?;
            let c = loaded.config;
            if (c.depth, c.width) != (net_cfg.depth, net_cfg.width) {
                bail!(
                    "{} holds a depth {} width {} net, expected depth {} width {}",
                    path.display(),
                    c.depth,
                    c.width,
                    net_cfg.depth,
                    net_cfg.width
                );
            }
            loaded
        }
        None => ExtractorParams::random(net_cfg, derive_seed(p.train.seed, "init", 0))?,
    };
    p.train.validate(&net_cfg)?;
    let dataset = Dataset::open(data)?;
    ctx.output(out)?;
    if p.train.iterations == 0 {
        eprintln!("warning: --iters 0 writes the initial parameters unchanged");
    }
    let mut log = Vec::new();
    let mut serial: Option<serde_json::Error> = None;
    let result = train::train(&dataset, params, &p.train, |e: &TrainLogEntry| {
        match serde_json::to_string(e) {
            Ok(line) => log.push(line),
            Err(err) => serial = serial.take().or(Some(err)),
        }
        if let Some(m) = e.val_margin {
            eprintln!("iter {} L0 {:.4} R {:.4} L {:.4} margin {m:.4}", e.iter, e.l0, e.r, e.l);
        }
    });
    write_log(&sibling(out, ".log.jsonl"), &log)?;
    if let Some(err) = serial {
        return Err(err.into());
    }
    let outcome = result?;
    net::save_params(&outcome.best, out)?;
    ctx.echo("train", &p, &sibling(out, ".config.json"))?;
    match outcome.best_iter {
        Some(i) => eprintln!("best checkpoint after iteration {i}, margin {:.6}", outcome.best_margin),
        None => eprintln!("initial parameters kept, margin {:.6}", outcome.best_margin),
    }
    Ok(())
}

fn extract(ctx: &Ctx, model: &Path, image: &Path, out: &Path, png: Option<Option<PathBuf>>) -> Result<()> {
    let params = net::load_params(model)?.with_mode(Mode::Eval);
    let img = raster::load_any(image)?;
    let preview = png.map(|p| p.unwrap_or_else(|| out.with_extension("png")));
    ctx.output(out)?;
    if let Some(p) = &preview {
        ctx.output(p)?;
    }
    let np = params.extract(&img)?;
    raster::save_raster(&np, out)?;
    if let Some(p) = &preview {
        raster::render_heatmap_png(&np, p)?;
    }
    #[derive(Serialize)]
    struct ExtractParams<'a> {
        model: &'a Path,
        image: &'a Path,
    }
    ctx.echo("extract", &ExtractParams { model, image }, &sibling(out, ".config.json"))
}

fn localize_cmd(
    ctx: &Ctx,
    model: &Path,
    image: &Path,
    out: &Path,
    png: Option<&Path>,
    cfg: &LocalizeConfig,
) -> Result<()> {
    let params = net::load_params(model)?;
    let img = raster::load_any(image)?;
    ctx.output(out)?;
    if let Some(p) = png {
        ctx.output(p)?;
    }
    let loc = localize::localize(&params, &img, cfg)?;
    raster::save_raster(&loc.heatmap, out)?;
    if let Some(p) = png {
        raster::render_heatmap_png(&loc.heatmap, p)?;
    }
    localize::save_diagnostics(&loc.diagnostics, sibling(out, ".em.json"))?;
    ctx.echo("localize", cfg, &sibling(out, ".config.json"))
}

fn evaluate(ctx: &Ctx, pred: &Path, gt: &Path, report: &Path, csv: Option<&Path>, cfg: &EvalConfig) -> Result<()> {
    ctx.output(report)?;
    if let Some(c) = csv {
        ctx.output(c)?;
    }
    let r = metrics::evaluate_dataset(pred, gt, cfg)?;
    write_atomic(report, r.to_json()?.as_bytes())?;
    if let Some(c) = csv {
        write_atomic(c, r.to_csv().as_bytes())?;
    }
    for s in &r.skipped {
        eprintln!("skipped {}: {}", s.name, s.reason);
    }
    let label = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    println!("{}", r.table_row(&label));
    ctx.echo("evaluate", cfg, &sibling(report, ".config.json"))
}

fn identify(ctx: &Ctx, model: &Path, data: &Path, report: &Path, cfg: &IdentifyConfig) -> Result<()> {
    let params = net::load_params(model)?;
    let dataset = Dataset::open(data)?;
    let table_path = report.with_extension("txt");
    ctx.output(report)?;
    ctx.output(&table_path)?;
    let r = source_id::run_identification(&dataset, &params, cfg)?;
    write_atomic(report, serde_json::to_string_pretty(&r)?.as_bytes())?;
    let table = r.confusion.to_table();
    write_atomic(&table_path, table.as_bytes())?;
    print!("{table}");
    ctx.echo("identify", cfg, &sibling(report, ".config.json"))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SpliceParams {
    count: usize,
    split: Split,
    seed: u64,
}

impl Default for SpliceParams {
    fn default() -> Self {
        Self {
            count: 20,
            split: Split::Test,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct CaseRecord<'a> {
    name: String,
    host_image: &'a str,
    donor_image: &'a str,
    host_model: u32,
    donor_model: u32,
    region: camera::SpliceRegion,
}

fn splice_cmd(ctx: &Ctx, data: &Path, out: &Path, p: &SpliceParams) -> Result<()> {
    let dataset = Dataset::open(data)?;
    let entries: Vec<_> = dataset.manifest.split(p.split).collect();
    let models: std::collections::BTreeSet<u32> = entries.iter().map(|e| e.model_id).collect();
    if models.len() < 2 {
        return Err(noiseprint::Error::InsufficientData(format!(
            "{:?} split holds fewer than 2 camera models",
            p.split
        ))
        .into());
    }
    ctx.output_dir(out)?;
    let (img_dir, gt_dir) = (out.join("images"), out.join("gt"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&gt_dir)?;
    let n = entries.len() as u64;
    let mut cases = Vec::with_capacity(p.count);
    for k in 0..p.count as u64 {
        let host = entries[(derive_seed(p.seed, "splice-host", k) % n) as usize];
        let donors: Vec<_> = entries.iter().filter(|e| e.model_id != host.model_id).collect();
        let donor = donors[(derive_seed(p.seed, "splice-donor", k) % donors.len() as u64) as usize];
        let case = camera::splice(
            &dataset.load(host)?,
            host.model_id,
            &dataset.load(donor)?,
            donor.model_id,
            derive_seed(p.seed, "splice", k),
        )?;
        let name = format!("case_{k:03}");
        raster::save_image(&case.composite, img_dir.join(format!("{name}.png")))?;
        raster::save_mask_png(&case.gt, gt_dir.join(format!("{name}.png")))?;
        cases.push(CaseRecord {
            name,
            host_image: &host.image_path,
            donor_image: &donor.image_path,
            host_model: case.host_model,
            donor_model: case.donor_model,
            region: case.region,
        });
    }
    write_atomic(&out.join("cases.json"), serde_json::to_string_pretty(&cases)?.as_bytes())?;
    ctx.echo("splice", p, &out.join("run_config.json"))?;
    eprintln!("wrote {} spliced images to {}", cases.len(), out.display());
    Ok(())
}
