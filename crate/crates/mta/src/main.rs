use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use mta::config::RunConfig;
use mta::dataset::{write_scenes, write_vocabulary};
use mta::harness::{ablate, evaluate, train, RunRecord, Split, Sweeps, OUTPUT_ROOT_ENV};
use mta::{HarnessError, Result};
use mta_core::scenegen::{generate_dataset, Vocabulary};

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; flags given alongside override it"),
    );
    RunConfig::KEYS
        .iter()
        .zip(RunConfig::HELP)
        .fold(cmd, |cmd, (key, help)| {
            cmd.arg(
                Arg::new(*key)
                    .long(*key)
                    .value_name("VALUE")
                    .allow_negative_numbers(true)
                    .help(help.trim().to_string())
                    .help_heading("Run configuration"),
            )
        })
}

fn cli() -> Command {
    Command::new("mta")
        .about("Train, evaluate and ablate task-aligned detection and captioning models")
        .after_help(format!(
            "{OUTPUT_ROOT_ENV} overrides the `output` key.\nExit codes: 0 success, 2 config error, 3 data error, 4 numerical failure."
        ))
        .subcommand_required(true)
        .subcommand(config_args(
            Command::new("gen-data").about("Write a generated dataset and its vocabulary").arg(
                Arg::new("out")
                    .long("out")
                    .value_name("FILE")
                    .required(true)
                    .help("dataset file; vocab.txt goes next to it"),
            ),
        ))
        .subcommand(config_args(Command::new("train").about("Train one run")).arg(
            Arg::new("resume")
                .long("resume")
                .value_name("EPOCH")
                .value_parser(clap::value_parser!(u64))
                .help("continue from the checkpoint written after this epoch"),
        ))
        .subcommand(
            Command::new("eval")
                .about("Evaluate a run directory or one of its checkpoints")
                .arg(Arg::new("target").required(true).value_name("PATH"))
                .arg(
                    Arg::new("split")
                        .long("split")
                        .default_value("val")
                        .value_parser(["train", "val"]),
                ),
        )
        .subcommand(
            config_args(Command::new("ablate").about("Baseline, +BLA, +DCA and +MTA over seeds"))
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .default_value("0,1,2")
                        .help("comma-separated training seeds"),
                )
                .arg(
                    Arg::new("sweep-layers")
                        .long("sweep-layers")
                        .action(ArgAction::SetTrue)
                        .help("also vary the text-alignment layer over first, middle and last"),
                )
                .arg(
                    Arg::new("sweep-objectives")
                        .long("sweep-objectives")
                        .action(ArgAction::SetTrue)
                        .help("also vary both alignment objectives"),
                ),
        )
        .subcommand(
            Command::new("plot")
                .about("Loss curves and metric bars of finished runs")
                .arg(Arg::new("out").long("out").value_name("DIR").required(true))
                .arg(Arg::new("runs").required(true).num_args(1..).value_name("RUN_DIR")),
        )
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::default(),
    };
    for key in RunConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(entries: &[(String, f64)]) {
    for (k, v) in entries {
        println!("{k} = {v:.6}");
    }
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("gen-data", m)) => {
            let cfg = run_config(m)?;
            let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
            let vocab = Vocabulary::standard();
            let scenes = generate_dataset(&cfg.scene_config(), cfg.scenes, cfg.data_seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
            }
            write_scenes(&out, &scenes, &vocab)?;
            let vocab_path = out.with_file_name("vocab.txt");
            write_vocabulary(&vocab_path, &vocab)?;
            println!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Some(("train", m)) => {
            let cfg = run_config(m)?;
            let record = train(&cfg, m.get_one::<u64>("resume").copied())?;
            println!(
                "run {} finished in {:.1}s; training loss {:.4} -> {:.4}",
                record.name, record.wall_clock_secs, record.initial_loss.total, record.final_loss.total
            );
            print_report(&record.report);
        }
        Some(("eval", m)) => {
            let split: Split = m.get_one::<String>("split").expect("defaulted").parse()?;
            let target = PathBuf::from(m.get_one::<String>("target").expect("required"));
            let (report, out) = evaluate(&target, split)?;
            println!("wrote {}", out.display());
            print_report(&report.entries(&mta_core::scenegen::CLASS_NAMES));
        }
        Some(("ablate", m)) => {
            let cfg = run_config(m)?;
            let seeds = m
                .get_one::<String>("seeds")
                .expect("defaulted")
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| HarnessError::Config(format!("bad seed {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let sweeps = Sweeps {
                layers: m.get_flag("sweep-layers"),
                objectives: m.get_flag("sweep-objectives"),
            };
            let result = ablate(&cfg, &seeds, sweeps)?;
            for (stem, rows) in &result.tables {
                println!("[{stem}]");
                print!("{}", mta::harness::ablation_csv(rows));
            }
        }
        Some(("plot", m)) => {
            let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
            let runs = m
                .get_many::<String>("runs")
                .expect("required")
                .map(|p| {
                    let dir = PathBuf::from(p);
                    let label = dir
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| p.clone());
                    RunRecord::load(&dir).map(|r| (label, r))
                })
                .collect::<Result<Vec<_>>>()?;
            for p in mta::plot::plot(&runs, &out)? {
                println!("wrote {}", p.display());
            }
        }
        _ => unreachable!("subcommand is required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
