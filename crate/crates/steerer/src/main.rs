//! Command-line entry point.
//!
//! Subcommands: gen-data, train, eval, predict, localize, gradcheck,
//! diagnose-masks. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use steerer::densitymap::{read_points, write_points};
use steerer::error::{Error, ErrorKind};
use steerer::harness::{
    self, load_checkpoint, restore_model, GradCheckOptions, RunConfig, TrainOptions,
};
use steerer::synth::{read_pgm, CorpusSpec, SceneSpec, Split};
use steerer::tensor::write_named_tensors;

const USAGE: &str = "\
usage: steerer <command> [flags] [args]

commands:
  gen-data                      generate the synthetic corpus at corpus.root
  train                         train a model per the active config
  eval                          evaluate a checkpoint (--ckpt, --split)
  predict <image.pgm>           density map + count for one image (--ckpt)
  localize <image.pgm>          predict + extract object centers (--ckpt)
  gradcheck                     finite-difference verification suite
  diagnose-masks <img> <pts>    dump winner grid and masks (--ckpt)

flags:
  --config PATH   key = value configuration file (defaults apply otherwise)
  --seed N        override the config seed
  --ckpt PATH     checkpoint to load
  --split NAME    train | val | test (default val)
  --out PATH      output directory override
  --verbose       per-step training trace
";

struct Cli {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    ckpt: Option<PathBuf>,
    split: Split,
    out: Option<PathBuf>,
    verbose: bool,
    positional: Vec<PathBuf>,
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

fn parse_args(args: &[String]) -> Result<Cli, CliError> {
    let usage = |msg: &str| CliError::Usage(msg.to_string());
    let mut it = args.iter();
    let command = it
        .next()
        .ok_or_else(|| usage("missing command"))?
        .to_string();
    let mut cli = Cli {
        command,
        config: None,
        seed: None,
        ckpt: None,
        split: Split::Val,
        out: None,
        verbose: false,
        positional: Vec::new(),
    };
    while let Some(arg) = it.next() {
        let mut flag_value = |name: &str| -> Result<String, CliError> {
            it.next()
                .map(String::from)
                .ok_or_else(|| usage(&format!("{name} needs a value")))
        };
        match arg.as_str() {
            "--config" => cli.config = Some(PathBuf::from(flag_value("--config")?)),
            "--seed" => {
                cli.seed = Some(
                    flag_value("--seed")?
                        .parse()
                        .map_err(|_| usage("--seed must be an integer"))?,
                )
            }
            "--ckpt" => cli.ckpt = Some(PathBuf::from(flag_value("--ckpt")?)),
            "--split" => {
                cli.split = flag_value("--split")?
                    .parse()
                    .map_err(|e: Error| usage(&e.to_string()))?
            }
            "--out" => cli.out = Some(PathBuf::from(flag_value("--out")?)),
            "--verbose" => cli.verbose = true,
            other if other.starts_with("--") => {
                return Err(usage(&format!("unknown flag {other}")))
            }
            other => cli.positional.push(PathBuf::from(other)),
        }
    }
    Ok(cli)
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Checkpointed commands take the model and config from the snapshot; only
/// the output directory may be overridden.
fn checkpoint_config(cli: &Cli) -> Result<(RunConfig, steerer::model::SteererModel), CliError> {
    let path = cli
        .ckpt
        .as_ref()
        .ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
    let ckpt = load_checkpoint(path)?;
    let mut cfg = ckpt.config.clone();
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let model = restore_model(&ckpt)?;
    Ok((cfg, model))
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.command.as_str() {
        "gen-data" => {
            let cfg = effective_config(cli)?;
            let scene = SceneSpec {
                height: cfg.gen.image_h,
                width: cfg.gen.image_w,
                classes: cfg.gen.classes.clone(),
                render_width: cfg.gen.render_width,
                noise_amplitude: cfg.gen.noise,
                min_separation: cfg.gen.min_separation,
                placement_margin: cfg.gen.placement_margin,
                max_place_tries: 1000,
            };
            let spec = CorpusSpec {
                scene,
                train: cfg.gen.train,
                val: cfg.gen.val,
                test: cfg.gen.test,
            };
            let manifest = steerer::synth::write_corpus(&cfg.corpus_root, &spec, cfg.seed)?;
            println!(
                "wrote {} scenes to {}",
                manifest.entries.len(),
                cfg.corpus_root.display()
            );
            Ok(())
        }
        "train" => {
            let cfg = effective_config(cli)?;
            let outcome = harness::train(
                &cfg,
                TrainOptions {
                    verbose: cli.verbose,
                },
            )?;
            for m in &outcome.history {
                println!("{}", m.to_line());
            }
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(())
        }
        "eval" => {
            let (cfg, mut model) = checkpoint_config(cli)?;
            let dataset = harness::load_dataset(&cfg)?;
            let scenes = match cli.split {
                Split::Train => &dataset.train,
                Split::Val => &dataset.val,
                Split::Test => &dataset.test,
            };
            let report = harness::evaluate(&mut model, &cfg, scenes, cli.split)?;
            print!("{}", report.to_text());
            ensure_out_dir(&cfg)?;
            let path = cfg.out_dir.join(format!("eval_{}.txt", cli.split.as_str()));
            std::fs::write(&path, report.to_text()).map_err(|e| Error::io(&path, e))?;
            Ok(())
        }
        "predict" | "localize" => {
            let (cfg, mut model) = checkpoint_config(cli)?;
            let image_path = cli
                .positional
                .first()
                .ok_or_else(|| CliError::Usage("an image path is required".into()))?;
            let image = read_pgm(image_path)?;
            ensure_out_dir(&cfg)?;
            let stem = image_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let density = if cli.command == "predict" {
                harness::predict_density(&mut model, &image, cfg.density.scale)?
            } else {
                let (density, points) = harness::localize_image(&mut model, &cfg, &image)?;
                let pts_path = cfg.out_dir.join(format!("{stem}_points.txt"));
                write_points(&pts_path, &points)?;
                println!("points: {} -> {}", points.len(), pts_path.display());
                density
            };
            let count: f64 = density.sum();
            let dump = cfg.out_dir.join(format!("{stem}_density.bin"));
            let tensor = density.to_tensor();
            let mut buf = Vec::new();
            write_named_tensors(&mut buf, &[("density.level0".into(), &tensor)], &dump)?;
            std::fs::write(&dump, buf).map_err(|e| Error::io(&dump, e))?;
            println!("count={count:.6}");
            println!("density: {}", dump.display());
            Ok(())
        }
        "gradcheck" => {
            let cfg = effective_config(cli)?;
            let report = harness::run_gradcheck(cfg.seed, &GradCheckOptions::standard())?;
            print!("{}", report.to_text());
            if report.all_passed() {
                Ok(())
            } else {
                Err(CliError::Run(Error::NumericFailure {
                    context: "gradient check failed".into(),
                }))
            }
        }
        "diagnose-masks" => {
            let (cfg, mut model) = checkpoint_config(cli)?;
            let (image_path, pts_path) = match &cli.positional[..] {
                [i, p] => (i, p),
                _ => {
                    return Err(CliError::Usage(
                        "diagnose-masks needs <image.pgm> <points.txt>".into(),
                    ))
                }
            };
            let image = read_pgm(image_path)?;
            let points = read_points(pts_path)?;
            let diag = harness::diagnose_masks(&mut model, &cfg, &image, &points)?;
            ensure_out_dir(&cfg)?;
            let mut text = String::from("# selection grid (winning level per patch)\n");
            text.push_str(&diag.grid.to_text_grid());
            for (j, m) in diag.masks.onehot.iter().enumerate() {
                text.push_str(&format!("# onehot level {j}\n{}", m.to_text_grid()));
            }
            for (j, m) in diag.masks.inherited.iter().enumerate() {
                text.push_str(&format!("# inherited level {j}\n{}", m.to_text_grid()));
            }
            let path = cfg.out_dir.join("masks.txt");
            std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            print!("{text}");
            println!("written: {}", path.display());
            Ok(())
        }
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            return ExitCode::from(1);
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}
