//! Command-line surface.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use irt_core::metrics::{miou, ConfusionMatrix};
use irt_core::scene::{micro_town, micro_town_rig};
use irt_core::transformer::Variant;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{self, Dataset, Manifest, Split};
use crate::error::{IrtError, Result};
use crate::raster;
use crate::trainer::{self, RenderMode, Renderer, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "irt", version, about = "Multi-view semantic segmentation with implicit ray transformers")]
pub struct Cli {
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML training config; missing keys take the micro-town defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for datasets, checkpoints, renders and reports.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    #[value(name = "B")]
    B,
    #[value(name = "RT")]
    Rt,
    #[value(name = "RTT")]
    Rtt,
    #[value(name = "RTC")]
    Rtc,
    #[value(name = "RTTC")]
    Rttc,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::B => Variant::B,
            VariantArg::Rt => Variant::RT,
            VariantArg::Rtt => Variant::RTT,
            VariantArg::Rtc => Variant::RTC,
            VariantArg::Rttc => Variant::RTTC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Rgb,
    Semantic,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ViewSet {
    Train,
    Holdout,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the micro-town oracle scene into a dataset.
    MakeScene {
        /// Image width and height in pixels.
        #[arg(long, default_value_t = irt_core::scene::MICRO_TOWN_SIZE)]
        size: usize,
        /// Number of labeled train views, spread evenly over the orbit.
        #[arg(long, default_value_t = 2)]
        labeled: usize,
    },
    /// Stage 1: fit the color field.
    TrainColor {
        /// Dataset directory (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Stage 2: train the segmentation networks on the frozen field.
    TrainSeg {
        #[arg(long, value_enum, default_value = "RTTC")]
        variant: VariantArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint (defaults to <out>/color/final.ckpt).
        #[arg(long)]
        color_ckpt: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Render dataset cameras from a checkpoint.
    Render {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Use the stage-2 checkpoint of this variant instead of stage 1.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Explicit checkpoint path.
        #[arg(long, conflicts_with = "variant")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "holdout")]
        views: ViewSet,
        /// Also write raw little-endian f64 logits in semantic mode.
        #[arg(long)]
        logits: bool,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Held-out mIoU and PSNR tables, or a dataset summary.
    Eval {
        /// Print a manifest summary and exit.
        #[arg(long)]
        describe: bool,
        /// Variants to evaluate; defaults to every trained one.
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Vec<VariantArg>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let out = cli.out.as_path();
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| out.to_path_buf());
    match &cli.command {
        Command::MakeScene { size, labeled } => make_scene(out, *size, *labeled),
        Command::TrainColor { data, resume, quiet } => {
            let data = Dataset::open(&data_dir(data))?;
            let o = trainer::train_color(&data, &config, out, &TrainOptions { resume: *resume, quiet: *quiet })?;
            if let Some((step, p)) = o.evals.last() {
                println!("held-out PSNR {p:.2} dB at step {step}");
            }
            println!("wrote {}", trainer::final_path(&trainer::color_dir(out)).display());
            Ok(())
        }
        Command::TrainSeg { variant, data, color_ckpt, resume, quiet } => {
            let data = Dataset::open(&data_dir(data))?;
            let ck = color_ckpt.clone().unwrap_or_else(|| trainer::final_path(&trainer::color_dir(out)));
            let v = Variant::from(*variant);
            let o = trainer::train_seg(&data, &ck, &config, v, out, &TrainOptions { resume: *resume, quiet: *quiet })?;
            if let Some((step, m)) = o.evals.last() {
                println!("held-out mIoU {m:.4} at step {step}");
            }
            println!("wrote {}", trainer::final_path(&trainer::seg_dir(out, v)).display());
            Ok(())
        }
        Command::Render { mode, variant, checkpoint, views, logits, data } => {
            let data = Dataset::open(&data_dir(data))?;
            let path = match (checkpoint, variant) {
                (Some(p), _) => p.clone(),
                (None, Some(v)) => trainer::final_path(&trainer::seg_dir(out, (*v).into())),
                (None, None) => trainer::final_path(&trainer::color_dir(out)),
            };
            render(&data, &path, *mode, *views, *logits, out)
        }
        Command::Eval { describe, variants, data } => {
            let dir = data_dir(data);
            if *describe {
                let (m, _) = dataset::load_manifest(&dir)?;
                print!("{}", describe_manifest(&m));
                return Ok(());
            }
            let data = Dataset::open(&dir)?;
            let vs: Vec<Variant> = variants.iter().map(|&v| v.into()).collect();
            let report = evaluate(&data, out, &vs)?;
            print!("{report}");
            Ok(())
        }
    }
}

fn make_scene(out: &Path, size: usize, labeled: usize) -> Result<()> {
    if size == 0 {
        return Err(IrtError::Config("--size must be at least 1".into()));
    }
    let scene = micro_town();
    let mut rig = micro_town_rig(&scene, size);
    let n = rig.train.len();
    if labeled > n {
        return Err(IrtError::Config(format!("--labeled {labeled} exceeds {n} train views")));
    }
    rig.labeled = (0..labeled).map(|i| i * n / labeled).collect();
    let m = dataset::write_dataset(out, "micro-town", &scene, &rig)?;
    print!("{}", describe_manifest(&m));
    Ok(())
}

pub fn describe_manifest(m: &Manifest) -> String {
    let mut s = String::new();
    let train = m.views_in(Split::Train);
    let holdout = m.views_in(Split::Holdout);
    let labeled = m.labeled_views();
    let _ = writeln!(s, "scene: {}", m.scene);
    let _ = writeln!(s, "views: {} ({} train, {} held-out)", m.views.len(), train.len(), holdout.len());
    let _ = writeln!(s, "labeled views: {} {:?}", labeled.len(), labeled);
    let pixels = |vs: &[usize]| vs.iter().map(|&i| m.views[i].camera.width as u64 * m.views[i].camera.height as u64).sum::<u64>();
    let (lp, tp) = (pixels(&labeled), pixels(&train));
    let _ = writeln!(s, "labeled pixels: {lp} of {tp} train pixels ({:.1}%)", 100.0 * lp as f64 / tp.max(1) as f64);
    let sizes: std::collections::BTreeSet<(u32, u32)> = m.views.iter().map(|v| (v.camera.width, v.camera.height)).collect();
    let sizes: Vec<String> = sizes.iter().map(|(w, h)| format!("{w}x{h}")).collect();
    let _ = writeln!(s, "image sizes: {}", sizes.join(", "));
    let b = m.bounds;
    let _ = writeln!(s, "bounds: near {} far {} box {:?}..{:?}", b.near, b.far, b.min, b.max);
    let _ = writeln!(s, "classes: {}", m.classes.len());
    for c in &m.classes {
        let _ = writeln!(s, "  {} {} rgb({}, {}, {})", c.id, c.name, c.rgb[0], c.rgb[1], c.rgb[2]);
    }
    s
}

fn render(data: &Dataset, ckpt: &Path, mode: ModeArg, views: ViewSet, logits: bool, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let renderer = Renderer::new(&ck)?;
    let mode = match mode {
        ModeArg::Rgb => RenderMode::Rgb,
        ModeArg::Semantic => RenderMode::Semantic,
        ModeArg::Depth => RenderMode::Depth,
    };
    let ids: Vec<usize> = match views {
        ViewSet::Train => data.manifest.views_in(Split::Train),
        ViewSet::Holdout => data.manifest.views_in(Split::Holdout),
        ViewSet::All => (0..data.manifest.views.len()).collect(),
    };
    let tag = renderer.variant.map_or_else(|| "color".to_string(), |v| format!("seg-{v}"));
    let dir = out.join("render").join(tag).join(format!("{mode:?}").to_lowercase());
    let b = data.manifest.bounds;
    for &v in &ids {
        let r = renderer.render_view(&data.cameras[v], b.near, b.far, mode, Some(&data.image_tensor(v)))?;
        let (w, h) = (r.width, r.height);
        match mode {
            RenderMode::Rgb => raster::write_rgb8(&dir.join(format!("{v:04}.png")), w, h, &raster::quantize(&r.rgb))?,
            RenderMode::Depth => {
                let scaled: Vec<u16> = r.depth.iter().map(|d| ((d / b.far).clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
                raster::write_gray16(&dir.join(format!("{v:04}.png")), w, h, &scaled)?;
            }
            RenderMode::Semantic => {
                raster::write_gray8(&dir.join(format!("{v:04}.png")), w, h, &r.labels)?;
                let color: Vec<u8> = r.labels.iter().flat_map(|&l| data.manifest.classes[l as usize].rgb).collect();
                raster::write_rgb8(&dir.join(format!("{v:04}-color.png")), w, h, &color)?;
                if logits {
                    let p = dir.join(format!("{v:04}.logits"));
                    let bytes: Vec<u8> = r.logits.iter().flat_map(|x| x.to_le_bytes()).collect();
                    std::fs::write(&p, bytes).map_err(|e| IrtError::io(&p, e))?;
                }
            }
        }
    }
    println!("rendered {} views to {}", ids.len(), dir.display());
    Ok(())
}

/// `class,name,iou` rows; classes absent from both truth and prediction
/// have an empty iou field.
pub fn iou_csv(m: &Manifest, per_class: &[Option<f64>]) -> String {
    let mut s = String::from("class,name,iou\n");
    for (c, iou) in m.classes.iter().zip(per_class) {
        let _ = writeln!(s, "{},{},{}", c.id, c.name, iou.map_or(String::new(), |v| format!("{v:.6}")));
    }
    s
}

pub fn confusion_dump(cm: &ConfusionMatrix) -> String {
    let n = cm.classes();
    let mut s = String::new();
    for t in 0..n {
        let row: Vec<String> = (0..n).map(|p| cm.get(t, p).to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| IrtError::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| IrtError::io(path, e))
}

/// Evaluates the stage-1 checkpoint and each requested (or every trained)
/// stage-2 variant on the held-out views. Writes per-variant CSVs, the
/// confusion matrices and a variant table under `<out>/eval`.
pub fn evaluate(data: &Dataset, out: &Path, variants: &[Variant]) -> Result<String> {
    let m = &data.manifest;
    let views = m.views_in(Split::Holdout);
    if views.is_empty() {
        return Err(IrtError::Schema("no held-out views to evaluate".into()));
    }
    let mut report = String::new();
    let color = trainer::final_path(&trainer::color_dir(out));
    if color.exists() {
        let r = Renderer::new(&Checkpoint::load(&color)?)?;
        let p = trainer::evaluate_rgb(&r, data, &views)?;
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        let _ = writeln!(report, "stage 1 held-out PSNR: {mean:.2} dB over {} views", p.len());
    }
    let explicit = !variants.is_empty();
    let wanted: Vec<Variant> = if explicit { variants.to_vec() } else { Variant::ALL.to_vec() };
    let eval_dir = out.join("eval");
    let mut rows = Vec::new();
    for v in wanted {
        let path = trainer::final_path(&trainer::seg_dir(out, v));
        if !path.exists() && !explicit {
            continue;
        }
        let r = Renderer::new(&Checkpoint::load(&path)?)?;
        let cm = trainer::evaluate_semantic(&r, data, &views)?;
        let (mean, per) = miou(&cm)?;
        write_text(&eval_dir.join(v.name()).join("iou.csv"), &iou_csv(m, &per))?;
        write_text(&eval_dir.join(v.name()).join("confusion.txt"), &confusion_dump(&cm))?;
        rows.push((v, mean, per));
    }
    if rows.is_empty() {
        return Err(IrtError::MissingFile { path: trainer::final_path(&trainer::seg_dir(out, Variant::RTTC)) });
    }
    let names: Vec<&str> = m.classes.iter().map(|c| c.name.as_str()).collect();
    let mut table = format!("variant,{},miou\n", names.join(","));
    let _ = writeln!(report, "held-out mIoU over {} views:", views.len());
    let _ = writeln!(report, "{:<8}{}  {:>8}", "variant", names.iter().map(|n| format!("{n:>11}")).collect::<String>(), "mIoU");
    for (v, mean, per) in &rows {
        let cells: Vec<String> = per.iter().map(|x| x.map_or(String::new(), |x| format!("{x:.6}"))).collect();
        let _ = writeln!(table, "{v},{},{mean:.6}", cells.join(","));
        let shown: String = per.iter().map(|x| x.map_or(format!("{:>11}", "-"), |x| format!("{:>11.4}", x))).collect();
        let _ = writeln!(report, "{:<8}{shown}  {mean:>8.4}", v.name());
    }
    write_text(&eval_dir.join("variants.csv"), &table)?;
    let _ = writeln!(report, "tables written to {}", eval_dir.display());
    Ok(report)
}
