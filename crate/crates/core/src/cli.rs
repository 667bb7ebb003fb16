//! Command-line entry points: scene generation, training, rendering,
//! evaluation, and the mock prior server.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::img::{read_png_rgb, write_pfm, write_png_rgb, Image};
use crate::metrics::{evaluate, EvalFrame};
use crate::optim::{train, write_log_csv, TrainConfig};
use crate::prior::{
    GaussianPredictor, MockPriorServer, MuSource, NoisePredictor, RemotePredictor,
};
use crate::render::{render_view, RenderOptions};
use crate::scene::{generate_synthetic_scene, load_dataset, save_dataset, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "sdsfield",
    about = "Score-distillation radiance-field inpainting engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic posed RGB-D dataset with removal masks.
    MakeScene(MakeSceneArgs),
    /// Train an inpainting field on a scene directory.
    Train(TrainArgs),
    /// Render color/depth (and optionally normals) at the scene's poses.
    Render(RenderArgs),
    /// Score rendered views against the scene's held-out ground truth.
    Eval(EvalArgs),
    /// Serve the denoiser wire protocol backed by the analytic Gaussian prior.
    MockPrior(MockPriorArgs),
}

#[derive(Args)]
struct MakeSceneArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Image width in pixels.
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 32)]
    height: usize,
    /// Number of camera poses on the arc.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Mask dilation radius in pixels over the exact object silhouette.
    #[arg(long, default_value_t = 1)]
    dilate: usize,
    /// Omit the occluding object (images equal the clean background).
    #[arg(long)]
    no_object: bool,
    /// Skip writing depth maps.
    #[arg(long)]
    no_depth: bool,
    /// Text prompt stored with the scene and passed to the prior.
    #[arg(long, default_value = "a clean wooden desk surface")]
    prompt: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory produced by make-scene (or the documented layout).
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for the checkpoint, loss CSV, and config echo.
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; omitted fields use documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Ablation row: i = reconstruction only, ii = + single-view appearance
    /// SDS, iii = + precomputed inpainted depth, iv = + geometry SDS,
    /// v = full multi-view.
    #[arg(long, value_parser = ["i", "ii", "iii", "iv", "v"])]
    ablation: Option<String>,
    /// Diffusion prior backend.
    #[arg(long, value_parser = ["gaussian", "remote"], default_value = "gaussian")]
    prior: String,
    /// Remote prior endpoint, e.g. http://127.0.0.1:9000.
    #[arg(long)]
    endpoint: Option<String>,
    /// Constant mode (gray level) of the in-process Gaussian prior.
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    /// PNG whose pixels form the Gaussian prior's mode image.
    #[arg(long)]
    mu_from: Option<PathBuf>,
    /// Variance of the in-process Gaussian prior.
    #[arg(long, default_value_t = 0.2)]
    s2: f64,
    /// Square resolution fed to the prior (defaults: 64 in-process,
    /// 256 remote).
    #[arg(long)]
    prior_resolution: Option<usize>,
    /// Directory of inpainted depth maps for ablation row iii.
    #[arg(long)]
    inpainted_depth: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory providing the camera poses.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for PNG color and PFM depth per pose.
    #[arg(long)]
    out: PathBuf,
    /// Render a single frame index instead of all poses.
    #[arg(long)]
    frame: Option<usize>,
    /// Also write plane-fit normal maps as PFM.
    #[arg(long)]
    normals: bool,
    /// Samples per ray.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Render seed (stratified ray jitter).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of rendered outputs from the render subcommand.
    #[arg(long)]
    renders: PathBuf,
    /// Scene directory with masks and held-out ground truth.
    #[arg(long)]
    scene: PathBuf,
    /// Where to write the JSON report (table always goes to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MockPriorArgs {
    /// Bind address, e.g. 127.0.0.1:9000 (port 0 picks one).
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: String,
    /// Constant mode (gray level) of the served Gaussian prior.
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    /// PNG whose pixels form the served mode image.
    #[arg(long)]
    mu_from: Option<PathBuf>,
    /// Variance of the served Gaussian prior.
    #[arg(long, default_value_t = 0.2)]
    s2: f64,
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeScene(a) => cmd_make_scene(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::MockPrior(a) => cmd_mock_prior(a),
    }
}

fn cmd_make_scene(args: MakeSceneArgs) -> Result<()> {
    let spec = SyntheticSpec {
        width: args.width,
        height: args.height,
        frames: args.frames,
        dilate: args.dilate,
        object: !args.no_object,
        with_depth: !args.no_depth,
        prompt: args.prompt,
    };
    let dataset = generate_synthetic_scene(&spec)?;
    save_dataset(&args.out, &dataset)?;
    println!(
        "wrote {} frames ({}x{}) to {}",
        dataset.frames.len(),
        spec.width,
        spec.height,
        args.out.display()
    );
    Ok(())
}

fn mu_source(mu: f64, mu_from: &Option<PathBuf>) -> Result<MuSource<f32>> {
    match mu_from {
        Some(path) => Ok(MuSource::Single(read_png_rgb(path)?)),
        None => Ok(MuSource::Constant(mu)),
    }
}

fn apply_ablation(config: &mut TrainConfig, row: &str, args: &TrainArgs) -> Result<()> {
    config.appearance_sds = false;
    config.geometry_sds = false;
    config.depth_sds = false;
    config.multiview = false;
    config.inpainted_depth_dir = None;
    match row {
        "i" => {}
        "ii" => config.appearance_sds = true,
        "iii" => {
            config.appearance_sds = true;
            config.inpainted_depth_dir = Some(args.inpainted_depth.clone().ok_or_else(|| {
                Error::Config("--ablation iii requires --inpainted-depth".into())
            })?);
        }
        "iv" => {
            config.appearance_sds = true;
            config.geometry_sds = true;
        }
        "v" => {
            config.appearance_sds = true;
            config.geometry_sds = true;
            config.multiview = true;
        }
        other => return Err(Error::Config(format!("unknown ablation row {other:?}"))),
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        config.iterations = iterations;
    }
    if let Some(row) = &args.ablation {
        apply_ablation(&mut config, row, &args)?;
    } else if let Some(dir) = &args.inpainted_depth {
        config.inpainted_depth_dir = Some(dir.clone());
    }
    if let Some(r) = args.prior_resolution {
        config.prior_resolution = [r, r];
    } else if args.prior == "remote" {
        config.prior_resolution = [256, 256];
    }
    config.validate()?;
    let dataset = load_dataset(&args.scene)?;

    let predictor: Option<Box<dyn NoisePredictor<f32>>> = match args.prior.as_str() {
        "remote" => {
            let endpoint = args
                .endpoint
                .as_deref()
                .ok_or_else(|| Error::Config("--prior remote requires --endpoint".into()))?;
            Some(Box::new(RemotePredictor::new(
                endpoint,
                Duration::from_secs(30),
                2,
            )))
        }
        _ => Some(Box::new(GaussianPredictor::<f32>::new(
            mu_source(args.mu, &args.mu_from)?,
            args.s2,
        )?)),
    };

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("config.toml"),
        toml::to_string_pretty(&config).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let out = train(&config, &dataset, predictor.as_deref(), None, Some(&args.out))?;
    out.field.save_checkpoint(&args.out.join("field.ckpt"))?;
    write_log_csv(&args.out.join("loss.csv"), &out.log)?;
    let last = out.log.last().unwrap();
    println!(
        "trained {} iterations; final total loss {:.6}; outputs in {}",
        config.iterations,
        last.total,
        args.out.display()
    );
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let field = RadianceField::<f32>::load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.scene)?;
    let indices: Vec<usize> = match args.frame {
        Some(i) => {
            if i >= dataset.frames.len() {
                return Err(Error::InvalidInput(format!(
                    "frame {i} out of range ({} frames)",
                    dataset.frames.len()
                )));
            }
            vec![i]
        }
        None => (0..dataset.frames.len()).collect(),
    };
    std::fs::create_dir_all(&args.out)?;
    let opts = RenderOptions::<f32> {
        samples_per_ray: args.samples,
        stratified: true,
        seed: args.seed,
        background: [0.0; 3],
    };
    for i in indices {
        let view = render_view(&field, &dataset.frames[i].camera, &opts, args.normals)?;
        write_png_rgb(&args.out.join(format!("{i:04}.png")), &view.color)?;
        write_pfm(&args.out.join(format!("{i:04}_depth.pfm")), &view.depth)?;
        if let Some(normals) = &view.normals {
            write_pfm(&args.out.join(format!("{i:04}_normals.pfm")), normals)?;
        }
    }
    println!("rendered to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.scene)?;
    let references = if dataset.gt_frames.is_empty() {
        &dataset.frames
    } else {
        &dataset.gt_frames
    };
    let mut rendered_color: Vec<Image<f32>> = Vec::new();
    let mut rendered_depth: Vec<Option<Image<f32>>> = Vec::new();
    for i in 0..dataset.frames.len() {
        let png = args.renders.join(format!("{i:04}.png"));
        if !png.exists() {
            return Err(Error::InvalidInput(format!(
                "render count mismatch: {} missing ({} scene frames)",
                png.display(),
                dataset.frames.len()
            )));
        }
        rendered_color.push(read_png_rgb(&png)?);
        let pfm = args.renders.join(format!("{i:04}_depth.pfm"));
        rendered_depth.push(if pfm.exists() {
            Some(crate::img::read_pfm(&pfm)?)
        } else {
            None
        });
    }
    let frames: Vec<EvalFrame> = (0..dataset.frames.len())
        .map(|i| EvalFrame {
            rendered: &rendered_color[i],
            reference: &references[i].image,
            mask: &dataset.frames[i].mask,
            rendered_depth: rendered_depth[i].as_ref(),
            reference_depth: references[i].depth.as_ref(),
        })
        .collect();
    let report = evaluate(&frames, &format!("scene={}", args.scene.display()))?;
    print!("{}", report.to_table());
    if let Some(path) = &args.out {
        std::fs::write(path, report.to_json()?)?;
    }
    Ok(())
}

fn cmd_mock_prior(args: MockPriorArgs) -> Result<()> {
    let predictor: Arc<dyn NoisePredictor<f32>> = Arc::new(GaussianPredictor::<f32>::new(
        mu_source(args.mu, &args.mu_from)?,
        args.s2,
    )?);
    let server = MockPriorServer::start(&args.bind, predictor)?;
    println!("serving denoiser at {}", server.endpoint());
    server.join();
    Ok(())
}

/// Full --help text (all subcommands), used by the snapshot test and docs.
pub fn help_text() -> String {
    let mut cmd = Cli::command();
    let mut out = cmd.render_long_help().to_string();
    for sub in Cli::command().get_subcommands_mut() {
        out.push_str("\n---\n");
        out.push_str(&sub.render_long_help().to_string());
    }
    out
}

/// Testable dispatch over raw argv (excluding the binary name).
pub fn run_args<I, S>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let mut full: Vec<std::ffi::OsString> = vec!["sdsfield".into()];
    full.extend(argv.into_iter().map(|s| s.into()));
    let cli = Cli::try_parse_from(full)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    dispatch(cli.command)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_documents_every_flag() {
        let help = help_text();
        for flag in [
            "make-scene",
            "train",
            "render",
            "eval",
            "mock-prior",
            "--out",
            "--width",
            "--height",
            "--frames",
            "--dilate",
            "--no-object",
            "--no-depth",
            "--prompt",
            "--scene",
            "--config",
            "--seed",
            "--iterations",
            "--ablation",
            "--prior",
            "--endpoint",
            "--mu",
            "--mu-from",
            "--s2",
            "--prior-resolution",
            "--inpainted-depth",
            "--checkpoint",
            "--frame",
            "--normals",
            "--samples",
            "--renders",
            "--bind",
        ] {
            assert!(help.contains(flag), "missing {flag} in help output");
        }
    }

    #[test]
    fn ablation_rows_map_to_flags() {
        let args = TrainArgs {
            scene: PathBuf::new(),
            out: PathBuf::new(),
            config: None,
            seed: None,
            iterations: None,
            ablation: None,
            prior: "gaussian".into(),
            endpoint: None,
            mu: 0.5,
            mu_from: None,
            s2: 0.2,
            prior_resolution: None,
            inpainted_depth: Some(PathBuf::from("/tmp/depth")),
        };
        let mut c = TrainConfig::default();
        apply_ablation(&mut c, "i", &args).unwrap();
        assert!(!c.appearance_sds && !c.geometry_sds && !c.multiview);
        apply_ablation(&mut c, "ii", &args).unwrap();
        assert!(c.appearance_sds && !c.geometry_sds && !c.multiview);
        apply_ablation(&mut c, "iii", &args).unwrap();
        assert!(c.appearance_sds && c.inpainted_depth_dir.is_some() && !c.geometry_sds);
        apply_ablation(&mut c, "iv", &args).unwrap();
        assert!(c.appearance_sds && c.geometry_sds && !c.multiview);
        apply_ablation(&mut c, "v", &args).unwrap();
        assert!(c.appearance_sds && c.geometry_sds && c.multiview);
        let args_no_depth = TrainArgs {
            inpainted_depth: None,
            ..args
        };
        assert!(matches!(
            apply_ablation(&mut c, "iii", &args_no_depth).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn unknown_subcommand_is_invalid_input() {
        let err = run_args(["frobnicate"]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
