//! Command-line surface: `generate`, `ablate`, `eval` and `build-dataset`.
//!
//! Exit codes: 0 success, 2 validation or usage error, 3 backend error, 4 I/O error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};
use sound2img_core::Error;

use config::{parse_config, Kind, Settings, ABLATE, DATASET, EVAL, GENERATE, KEYS};

pub const CONFIG_ENV: &str = "SOUND2IMG_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Io { .. } => EXIT_IO,
        Error::Backend { .. }
        | Error::Capability(_)
        | Error::Diverged { .. }
        | Error::Oracle(_) => EXIT_BACKEND,
        _ => EXIT_VALIDATION,
    }
}

const SUBCOMMANDS: [(&str, u8, &str); 4] = [
    (
        "generate",
        GENERATE,
        "Generate an image for each input clip",
    ),
    (
        "ablate",
        ABLATE,
        "Run the full model and its five ablations on each input",
    ),
    (
        "eval",
        EVAL,
        "Compute CLIPscore, Inception Score and YOLO score over runs",
    ),
    (
        "build-dataset",
        DATASET,
        "Build a two-class concatenation dataset from ESC-50",
    ),
];

fn key_arg(def: &config::KeyDef) -> Arg {
    let long = def.key.replace('_', "-");
    let help = if def.default.is_empty() {
        format!("{} [config: {}]", def.help, def.key)
    } else {
        format!(
            "{} [default: {}] [config: {}]",
            def.help, def.default, def.key
        )
    };
    let arg = Arg::new(def.key)
        .long(long)
        .help(help)
        .value_name(def.key.to_uppercase());
    match def.kind {
        Kind::Value => arg.action(ArgAction::Set),
        Kind::List => arg.action(ArgAction::Append),
        Kind::Bool => arg
            .action(ArgAction::Set)
            .num_args(0..=1)
            .default_missing_value("true"),
    }
}

pub fn build_command() -> Command {
    let mut cmd = Command::new("sound2img")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Sound-guided image generation with attention-fused conditioning")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, scope, about) in SUBCOMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .help(format!(
                    "Config file of key = value lines; flags override it [env: {CONFIG_ENV}]"
                )),
        );
        for def in KEYS.iter().filter(|d| d.scope & scope != 0) {
            sub = sub.arg(key_arg(def));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Defaults, then the config file (from `--config` or the environment), then flags.
pub fn resolve_settings(matches: &ArgMatches, scope: u8) -> Result<Settings, Error> {
    let mut settings = Settings::default();
    let path = matches
        .get_one::<String>("config")
        .map(PathBuf::from)
        .or_else(|| {
            std::env::var_os(CONFIG_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        });
    if let Some(path) = path {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_config(&text)
            .and_then(|c| c.apply(&mut settings, scope))
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    for def in KEYS.iter().filter(|d| d.scope & scope != 0) {
        if let Some(values) = matches.get_many::<String>(def.key) {
            for v in values {
                settings.apply(def.key, v).map_err(|e| {
                    Error::Validation(format!("--{}: {e}", def.key.replace('_', "-")))
                })?;
            }
        }
    }
    Ok(settings)
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match build_command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let (_, scope, _) = SUBCOMMANDS
        .iter()
        .find(|(n, _, _)| *n == name)
        .expect("known subcommand");
    let outcome = resolve_settings(sub, *scope).and_then(|s| match name {
        "generate" => commands::generate(&s),
        "ablate" => commands::ablate(&s),
        "eval" => commands::eval(&s),
        "build-dataset" => commands::build_dataset(&s),
        _ => unreachable!(),
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
