//! Command-line surface: simulation, restoration, anytime streaming,
//! evaluation, and plotting, with a reproducible config override chain
//! (flag > config file > preset > default) recorded in a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::forward::{model_discrepancy, simulate_stack, FrameStack};
use crate::io;
use crate::metrics;
use crate::optics::{
    build_psf_basis, DEFAULT_BASIS_SAMPLES, DEFAULT_CONTROL_SPACING, DEFAULT_K_PRIME,
    DEFAULT_N_MODES,
};
use crate::trainer::{
    anytime_update, phase1_init, phase2_optimize, LossRecord, RestorationConfig, TrainError,
};

/// Tool version string recorded in run manifests.
pub const TOOL_VERSION: &str = env!("TURBMIT_GIT_DESCRIBE");

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 2;
const EXIT_DATA: i32 = 3;
const EXIT_DIVERGED: i32 = 4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Diverged(m) => m,
        }
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Diverged { .. } => {
                CliError::Diverged(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<crate::forward::ForwardError> for CliError {
    fn from(e: crate::forward::ForwardError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::optics::OpticsError> for CliError {
    fn from(e: crate::optics::OpticsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::metrics::MetricsError> for CliError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Air,
    Water,
}

impl Preset {
    fn config(self) -> RestorationConfig {
        match self {
            Preset::Air => RestorationConfig::air(),
            Preset::Water => RestorationConfig::water(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Air => "air",
            Preset::Water => "water",
        }
    }
}

/// Partial config: unset fields fall through to the previous layer.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigPatch {
    d_over_r0: Option<f64>,
    corr: Option<f64>,
    psf_kernel_size: Option<usize>,
    epochs_init: Option<usize>,
    epochs_main: Option<usize>,
    learning_rate: Option<f64>,
    n_frames: Option<usize>,
    image_size: Option<(usize, usize)>,
    seed: Option<u64>,
    loss_weights: Option<[f64; 3]>,
    max_displacement: Option<f64>,
    pe_bands: Option<usize>,
}

impl ConfigPatch {
    fn apply(&self, cfg: &mut RestorationConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            };
        }
        set!(d_over_r0);
        set!(corr);
        set!(psf_kernel_size);
        set!(epochs_init);
        set!(epochs_main);
        set!(learning_rate);
        set!(n_frames);
        set!(image_size);
        set!(seed);
        set!(loss_weights);
        set!(max_displacement);
        set!(pe_bands);
    }
}

/// Config-related flags shared by restore and anytime.
#[derive(Debug, Args, Clone)]
struct ConfigFlags {
    /// Named parameter preset.
    #[arg(long, value_enum, default_value = "air")]
    preset: Preset,
    /// JSON config file overriding the preset (fields are optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Turbulence strength D/r0.
    #[arg(long)]
    d_over_r0: Option<f64>,
    /// Spatial correlation strength (negative; nearer 0 is smoother).
    #[arg(long, allow_negative_numbers = true)]
    corr: Option<f64>,
    /// PSF kernel size (odd).
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Initialization epochs.
    #[arg(long)]
    epochs_init: Option<usize>,
    /// Joint optimization epochs.
    #[arg(long)]
    epochs_main: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Number of frames in the optimization window.
    #[arg(long = "frames-used")]
    n_frames: Option<usize>,
    /// Working resolution (height width); inputs are resized to this.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    image_size: Option<Vec<usize>>,
    /// RNG seed for all stochastic choices.
    #[arg(long)]
    seed: Option<u64>,
    /// Weights of the three joint loss terms.
    #[arg(long, num_args = 3, value_names = ["A", "B", "C"])]
    loss_weights: Option<Vec<f64>>,
    /// Maximum deformer displacement in normalized units.
    #[arg(long)]
    max_displacement: Option<f64>,
    /// Positional encoding frequency bands.
    #[arg(long)]
    pe_bands: Option<usize>,
}

impl ConfigFlags {
    /// Resolves flag > config file > preset > default.
    fn resolve(&self) -> Result<RestorationConfig, CliError> {
        let mut cfg = self.preset.config();
        if let Some(path) = &self.config {
            let patch: ConfigPatch = io::read_json(path)
                .map_err(|e| CliError::Data(format!("config file {}: {e}", path.display())))?;
            patch.apply(&mut cfg);
        }
        let flag_patch = ConfigPatch {
            d_over_r0: self.d_over_r0,
            corr: self.corr,
            psf_kernel_size: self.kernel_size,
            epochs_init: self.epochs_init,
            epochs_main: self.epochs_main,
            learning_rate: self.learning_rate,
            n_frames: self.n_frames,
            image_size: match &self.image_size {
                Some(v) => Some((v[0], v[1])),
                None => None,
            },
            seed: self.seed,
            loss_weights: match &self.loss_weights {
                Some(v) => Some([v[0], v[1], v[2]]),
                None => None,
            },
            max_displacement: self.max_displacement,
            pe_bands: self.pe_bands,
        };
        flag_patch.apply(&mut cfg);
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "turbmit",
    version = TOOL_VERSION,
    about = "Multi-frame turbulence mitigation: simulate distorted stacks and restore them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a turbulence-distorted frame stack from a clean image.
    Simulate {
        /// Clean source image (PNG).
        #[arg(long)]
        clean: PathBuf,
        /// Output directory for frames, ground truth, and sidecar.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "air")]
        preset: Preset,
        #[arg(long)]
        d_over_r0: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        corr: Option<f64>,
        #[arg(long)]
        kernel_size: Option<usize>,
        /// Number of distorted frames to generate.
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Working resolution (height width); the clean image is resized.
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [256, 256])]
        image_size: Vec<usize>,
    },
    /// Restore a clean image from a directory of distorted frames.
    Restore {
        /// Directory of input frames (PNG, lexical order).
        #[arg(long)]
        frames: PathBuf,
        /// Output directory for the restored image and artifacts.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Stream frames: cold-start on the first window, warm-update per frame.
    Anytime {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Epochs per warm-start update.
        #[arg(long, default_value_t = 60)]
        warm_epochs: usize,
        /// Order in which streamed frames are consumed.
        #[arg(long, default_value = "lexical")]
        stream_order: String,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Score a restored image against a ground-truth image.
    Eval {
        #[arg(long)]
        restored: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Optional frames directory for baseline comparisons.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Render plots (loss curve, model discrepancy map) for a finished run.
    Plot {
        /// A restore/anytime output directory.
        #[arg(long)]
        run: PathBuf,
    },
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            clean,
            out,
            preset,
            d_over_r0,
            corr,
            kernel_size,
            frames,
            seed,
            image_size,
        } => cmd_simulate(
            &clean,
            &out,
            preset,
            d_over_r0,
            corr,
            kernel_size,
            frames,
            seed,
            (image_size[0], image_size[1]),
        ),
        Command::Restore { frames, out, config } => cmd_restore(&frames, &out, &config),
        Command::Anytime { frames, out, warm_epochs, stream_order, config } => {
            cmd_anytime(&frames, &out, warm_epochs, &stream_order, &config)
        }
        Command::Eval { restored, truth, frames } => {
            cmd_eval(&restored, &truth, frames.as_deref())
        }
        Command::Plot { run } => cmd_plot(&run),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    clean: &Path,
    out: &Path,
    preset: Preset,
    d_over_r0: Option<f64>,
    corr: Option<f64>,
    kernel_size: Option<usize>,
    frames: usize,
    seed: u64,
    image_size: (usize, usize),
) -> Result<(), CliError> {
    if frames == 0 {
        return Err(CliError::Usage("--frames must be at least 1".into()));
    }
    let base = preset.config();
    let sidecar = io::SimulationSidecar {
        d_over_r0: d_over_r0.unwrap_or(base.d_over_r0),
        corr: corr.unwrap_or(base.corr),
        kernel_size: kernel_size.unwrap_or(base.psf_kernel_size),
        n_frames: frames,
        control_spacing: DEFAULT_CONTROL_SPACING,
        seed,
    };
    let (m, n) = image_size;
    if m % DEFAULT_CONTROL_SPACING != 0 || n % DEFAULT_CONTROL_SPACING != 0 {
        return Err(CliError::Usage(format!(
            "--image-size {m} {n} must be a multiple of the control spacing \
             {DEFAULT_CONTROL_SPACING}"
        )));
    }
    let img = io::resize_image(&io::read_png(clean)?, m, n);
    let (stack, _) = simulate_stack(&img, sidecar.turbulence(), frames, DEFAULT_CONTROL_SPACING, seed)?;
    io::save_stack(out, &stack, &img, &sidecar)?;
    println!(
        "wrote {} frames + {} + {} to {}",
        stack.len(),
        io::GROUND_TRUTH_NAME,
        io::SIDECAR_NAME,
        out.display()
    );
    Ok(())
}

/// Lexical listing, then a seeded subsample (order-preserving) when the
/// directory holds more frames than the window.
fn select_frames(dir: &Path, config: &RestorationConfig) -> Result<Vec<PathBuf>, CliError> {
    let all = io::frame_paths(dir)?;
    if all.len() < 2 {
        return Err(CliError::Data(format!(
            "{} holds {} frame image(s); need at least 2",
            dir.display(),
            all.len()
        )));
    }
    if all.len() <= config.n_frames {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut idx: Vec<usize> = (0..all.len()).collect();
    for i in 0..config.n_frames {
        let j = i + rng.gen_range(0..idx.len() - i);
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx[..config.n_frames].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| all[i].clone()).collect())
}

/// Builds (or reuses from cache) the quantized PSF basis for a config.
fn obtain_basis(out: &Path, config: &RestorationConfig) -> Result<Arc<crate::optics::PsfBasis>, CliError> {
    let params = config.turbulence();
    let p = config.psf_kernel_size;
    let k_prime = DEFAULT_K_PRIME.min(p * p);
    let cache = out.join("psf_basis.bin");
    if let Some(basis) =
        io::load_basis_if_matching(&cache, params, DEFAULT_N_MODES, DEFAULT_BASIS_SAMPLES, config.seed)
    {
        return Ok(Arc::new(basis));
    }
    let basis = build_psf_basis(params, DEFAULT_N_MODES, DEFAULT_BASIS_SAMPLES, k_prime, config.seed)
        .map_err(CliError::from)?
        .quantized();
    io::save_basis(&cache, &basis)?;
    Ok(Arc::new(basis))
}

/// Serializable record of one finished run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RestorationConfig,
    pub preset: String,
    pub frames_dir: String,
    pub input_digest: String,
    pub tool_version: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

fn write_metrics_json(
    path: &Path,
    report: &metrics::EvalReport,
    config: &RestorationConfig,
    preset: &str,
) -> Result<(), CliError> {
    let payload = json!({
        "psnr": report.psnr,
        "ssim": report.ssim,
        "baseline_psnr": report.baseline_psnr,
        "baseline_ssim": report.baseline_ssim,
        "input_psnr": report.input_psnr,
        "n_frames": config.n_frames,
        "preset": preset,
        "seed": config.seed,
    });
    io::atomic_write_json(path, &payload)?;
    Ok(())
}

fn load_truth_resized(
    frames_dir: &Path,
    config: &RestorationConfig,
) -> Result<Option<Array3<f64>>, CliError> {
    let path = frames_dir.join(io::GROUND_TRUTH_NAME);
    if !path.exists() {
        return Ok(None);
    }
    let (m, n) = config.image_size;
    Ok(Some(io::resize_image(&io::read_png(&path)?, m, n)))
}

fn cmd_restore(frames_dir: &Path, out: &Path, flags: &ConfigFlags) -> Result<(), CliError> {
    let config = flags.resolve()?;
    std::fs::create_dir_all(out).map_err(io::IoError::from)?;
    let paths = select_frames(frames_dir, &config)?;
    let (m, n) = config.image_size;
    let stack: FrameStack = io::load_frames(&paths, Some((m, n)))?;

    let t0 = Instant::now();
    let basis = obtain_basis(out, &config)?;
    let basis_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut state = phase1_init::<f32>(&stack, &config)?;
    let phase1_s = t1.elapsed().as_secs_f64();
    state.basis = Some(basis);

    let t2 = Instant::now();
    let restored = phase2_optimize(&mut state, &stack)?;
    let phase2_s = t2.elapsed().as_secs_f64();

    io::write_png(&out.join("restored.png"), &restored)?;
    io::write_loss_csv(&out.join("loss_curve.csv"), &state.history)?;
    io::save_checkpoint(&out.join("checkpoint.ckpt"), &state)?;

    if let Some(truth) = load_truth_resized(frames_dir, &config)? {
        let report = metrics::evaluate(&restored, &truth, &stack)?;
        write_metrics_json(&out.join("metrics.json"), &report, &config, flags.preset.name())?;
        println!(
            "restored PSNR {:.3} dB (temporal mean {:.3} dB), SSIM {:.4}",
            report.psnr, report.baseline_psnr, report.ssim
        );
    }

    let mut timings = BTreeMap::new();
    timings.insert("basis_s".into(), basis_s);
    timings.insert("phase1_s".into(), phase1_s);
    timings.insert("phase2_s".into(), phase2_s);
    timings.insert("total_s".into(), t0.elapsed().as_secs_f64());
    let manifest = RunManifest {
        config: config.clone(),
        preset: flags.preset.name().into(),
        frames_dir: frames_dir.display().to_string(),
        input_digest: io::dir_digest(frames_dir)?,
        tool_version: TOOL_VERSION.into(),
        timings,
    };
    io::atomic_write_json(&out.join("run_manifest.json"), &manifest)?;
    println!("wrote restored.png, loss_curve.csv, checkpoint.ckpt to {}", out.display());
    Ok(())
}

fn cmd_anytime(
    frames_dir: &Path,
    out: &Path,
    warm_epochs: usize,
    stream_order: &str,
    flags: &ConfigFlags,
) -> Result<(), CliError> {
    if stream_order != "lexical" {
        return Err(CliError::Usage(format!(
            "unsupported --stream-order {stream_order:?}; only \"lexical\" is available"
        )));
    }
    if warm_epochs == 0 {
        return Err(CliError::Usage("--warm-epochs must be at least 1".into()));
    }
    let config = flags.resolve()?;
    std::fs::create_dir_all(out).map_err(io::IoError::from)?;
    let all = io::frame_paths(frames_dir)?;
    if all.len() < config.n_frames + 1 {
        return Err(CliError::Data(format!(
            "{} holds {} frame image(s); anytime mode needs more than the window size {}",
            frames_dir.display(),
            all.len(),
            config.n_frames
        )));
    }
    let (m, n) = config.image_size;
    let window: FrameStack = io::load_frames(&all[..config.n_frames], Some((m, n)))?;

    // Cold start on the initial window.
    let t0 = Instant::now();
    let mut state = phase1_init::<f32>(&window, &config)?;
    state.basis = Some(obtain_basis(out, &config)?);
    let restored = phase2_optimize(&mut state, &window)?;
    let cold_s = t0.elapsed().as_secs_f64();
    let cold_epochs = config.epochs_init + config.epochs_main;
    let cold_final = state.history.last().map(|r| r.total).unwrap_or(f64::NAN);
    io::write_png(&out.join("restored_cold.png"), &restored)?;

    let mut timing = String::from("frame,warm_epochs,epochs_to_match,ratio,seconds\n");
    timing.push_str(&format!("cold,{cold_epochs},{cold_epochs},1.0,{cold_s}\n"));

    for (k, path) in all.iter().enumerate().skip(config.n_frames) {
        let frame = io::load_frames(std::slice::from_ref(path), Some((m, n)))?.remove(0);
        let before = state.history.len();
        let tk = Instant::now();
        let restored = anytime_update(&mut state, &frame, warm_epochs)?;
        let secs = tk.elapsed().as_secs_f64();
        let warm = &state.history[before..];
        // First warm epoch whose total reaches the cold-start final level.
        let to_match = warm
            .iter()
            .position(|r| r.total <= cold_final)
            .map(|i| i + 1)
            .unwrap_or(warm.len());
        let ratio = cold_epochs as f64 / to_match as f64;
        io::write_png(&out.join(format!("restored_{k:03}.png")), &restored)?;
        timing.push_str(&format!("{k},{},{to_match},{ratio},{secs}\n", warm.len()));
        println!(
            "frame {k}: {} warm epochs, matched cold loss in {to_match} (ratio {ratio:.1})",
            warm.len()
        );
    }
    io::atomic_write(&out.join("timing.csv"), timing.as_bytes())?;
    io::write_loss_csv(&out.join("loss_curve.csv"), &state.history)?;
    io::save_checkpoint(&out.join("checkpoint.ckpt"), &state)?;

    let mut timings = BTreeMap::new();
    timings.insert("cold_s".into(), cold_s);
    timings.insert("total_s".into(), t0.elapsed().as_secs_f64());
    let manifest = RunManifest {
        config: config.clone(),
        preset: flags.preset.name().into(),
        frames_dir: frames_dir.display().to_string(),
        input_digest: io::dir_digest(frames_dir)?,
        tool_version: TOOL_VERSION.into(),
        timings,
    };
    io::atomic_write_json(&out.join("run_manifest.json"), &manifest)?;
    Ok(())
}

fn cmd_eval(restored: &Path, truth: &Path, frames: Option<&Path>) -> Result<(), CliError> {
    let a = io::read_png(restored)?;
    let b = io::read_png(truth)?;
    let psnr = metrics::psnr(&a, &b)?;
    let ssim = metrics::ssim(&a, &b)?;
    let payload = match frames {
        None => json!({ "psnr": psnr, "ssim": ssim }),
        Some(dir) => {
            let paths = io::frame_paths(dir)?;
            let stack = io::load_frames(&paths, Some((b.dim().0, b.dim().1)))?;
            let report = metrics::evaluate(&a, &b, &stack)?;
            json!({
                "psnr": report.psnr,
                "ssim": report.ssim,
                "baseline_psnr": report.baseline_psnr,
                "baseline_ssim": report.baseline_ssim,
                "input_psnr": report.input_psnr,
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&payload).map_err(io::IoError::from)?);
    Ok(())
}

fn cmd_plot(run: &Path) -> Result<(), CliError> {
    let csv = run.join("loss_curve.csv");
    if !csv.exists() {
        return Err(CliError::Data(format!("{} has no loss_curve.csv", run.display())));
    }
    let history = io::read_loss_csv(&csv)?;
    if history.is_empty() {
        return Err(CliError::Data("loss curve is empty".into()));
    }
    let plot = render_loss_curve(&history);
    io::write_png(&run.join("loss_curve.png"), &plot)?;
    println!("wrote loss_curve.png");

    // Discrepancy map, when the run manifest points at a simulated stack.
    let manifest_path = run.join("run_manifest.json");
    if manifest_path.exists() {
        let manifest: RunManifest = io::read_json(&manifest_path)?;
        let frames_dir = PathBuf::from(&manifest.frames_dir);
        let sidecar_path = frames_dir.join(io::SIDECAR_NAME);
        let truth_path = frames_dir.join(io::GROUND_TRUTH_NAME);
        if sidecar_path.exists() && truth_path.exists() {
            let sidecar: io::SimulationSidecar = io::read_json(&sidecar_path)?;
            let truth = io::read_png(&truth_path)?;
            let map = discrepancy_map(&truth, &sidecar)?;
            io::write_png(&run.join("error_map.png"), &map)?;
            println!("wrote error_map.png");
        }
    }
    Ok(())
}

/// Mean tilt-then-blur vs blur-then-tilt gap over the stack's distortions,
/// normalized to [0,1] grayscale.
fn discrepancy_map(
    truth: &Array3<f64>,
    sidecar: &io::SimulationSidecar,
) -> Result<Array3<f64>, CliError> {
    let params = sidecar.turbulence();
    let p = params.kernel_size;
    let basis = build_psf_basis(
        params,
        DEFAULT_N_MODES,
        DEFAULT_BASIS_SAMPLES,
        DEFAULT_K_PRIME.min(p * p),
        sidecar.seed,
    )?;
    let (_, samples) = simulate_stack(
        truth,
        params,
        sidecar.n_frames,
        sidecar.control_spacing,
        sidecar.seed,
    )?;
    let (m, n, _) = truth.dim();
    let mut acc = ndarray::Array2::<f64>::zeros((m, n));
    for s in &samples {
        acc += &model_discrepancy(truth, s, &basis)?;
    }
    let max = acc.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    Ok(Array3::from_shape_fn((m, n, 3), |(i, j, _)| acc[(i, j)] / max))
}

const PLOT_W: usize = 640;
const PLOT_H: usize = 400;
const PLOT_MARGIN: usize = 40;

/// Rasterizes the loss history as a simple line plot.
fn render_loss_curve(history: &[LossRecord]) -> Array3<f64> {
    let mut img = Array3::<f64>::ones((PLOT_H, PLOT_W, 3));
    let series: [(&str, Box<dyn Fn(&LossRecord) -> f64>, [f64; 3]); 4] = [
        ("a", Box::new(|r: &LossRecord| r.term_a), [0.12, 0.35, 0.85]),
        ("b", Box::new(|r: &LossRecord| r.term_b), [0.10, 0.60, 0.25]),
        ("c", Box::new(|r: &LossRecord| r.term_c), [0.90, 0.55, 0.10]),
        ("total", Box::new(|r: &LossRecord| r.total), [0.05, 0.05, 0.05]),
    ];
    let y_max = history
        .iter()
        .map(|r| r.total)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let x_of = |e: usize| {
        PLOT_MARGIN as f64
            + (e as f64 - 1.0) / (history.len().max(2) as f64 - 1.0)
                * (PLOT_W - 2 * PLOT_MARGIN) as f64
    };
    let y_of = |v: f64| {
        (PLOT_H - PLOT_MARGIN) as f64
            - (v / y_max).clamp(0.0, 1.0) * (PLOT_H - 2 * PLOT_MARGIN) as f64
    };
    // Axes.
    for x in PLOT_MARGIN..PLOT_W - PLOT_MARGIN {
        set_px(&mut img, PLOT_H - PLOT_MARGIN, x, [0.6, 0.6, 0.6]);
    }
    for y in PLOT_MARGIN..PLOT_H - PLOT_MARGIN {
        set_px(&mut img, y, PLOT_MARGIN, [0.6, 0.6, 0.6]);
    }
    for (_, get, color) in &series {
        for pair in history.windows(2) {
            let (x0, y0) = (x_of(pair[0].epoch), y_of(get(&pair[0])));
            let (x1, y1) = (x_of(pair[1].epoch), y_of(get(&pair[1])));
            draw_line(&mut img, x0, y0, x1, y1, *color);
        }
    }
    img
}

fn set_px(img: &mut Array3<f64>, y: usize, x: usize, c: [f64; 3]) {
    if y < img.dim().0 && x < img.dim().1 {
        for ch in 0..3 {
            img[(y, x, ch)] = c[ch];
        }
    }
}

fn draw_line(img: &mut Array3<f64>, x0: f64, y0: f64, x1: f64, y1: f64, c: [f64; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + t * (x1 - x0);
        let y = y0 + t * (y1 - y0);
        set_px(img, y.round() as usize, x.round() as usize, c);
    }
}

/// Exposed for integration tests: resolves a config exactly as `restore` does.
pub fn resolve_config_for_test(args: &[&str]) -> Result<RestorationConfig, String> {
    let mut full = vec!["turbmit", "restore", "--frames", "x", "--out", "y"];
    full.extend_from_slice(args);
    let cli = Cli::try_parse_from(full).map_err(|e| e.to_string())?;
    match cli.command {
        Command::Restore { config, .. } => config.resolve().map_err(|e| e.message().to_string()),
        _ => unreachable!("constructed as restore"),
    }
}
