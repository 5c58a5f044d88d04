//! Command line front end: sparse transfer, pruning baselines, supervised
//! training, the toy probe, and result aggregation.

pub mod commands;
pub mod config;
pub mod record;

use ntt_core::{Error, Result};

use config::Settings;

const USAGE: &str = "\
ntt <command> [options]

commands:
  transfer   derive a sparse student from a dense teacher (label free)
  prune      build a baseline mask: random, scaled_random, snip,
             layerwise_snip, logit_snip, or dense
  train      supervised training from a checkpoint; writes a record CSV
  probe      toy two-digit pipeline: teacher vs transferred vs random
  report     aggregate record CSVs into summary and speedup tables

options (each takes a value):
  --preset NAME        toy-mlp | toy-lenet5 | mnist-mlp | fashion-mlp |
                       mnist-lenet5 | fashion-lenet5 | cifar-conv4
  --config PATH        settings file with [section] / key = value lines
  --arch NAME          lenet-300-100 | lenet-300-100-toy | lenet-5-caffe |
                       lenet-5-caffe-toy | conv-4
  --dataset NAME       synthetic | mnist | fashion | cifar10
  --data-dir PATH      directory holding the dataset files
  --method NAME        ntt | random | scaled_random | snip | layerwise_snip |
                       logit_snip | dense
  --scheme NAME        layerwise | global
  --density P          fraction of weights kept, in (0, 1]
  --seed N             base seed; repetition r uses seed N + r
  --reps N             repetitions
  --out DIR            output directory (default: out)
  --checkpoint PATH    explicit checkpoint for train (needs --reps 1)
  --records-dir DIR    where report looks for record_*.csv
  --KEY VALUE          any dotted settings key, e.g. --ntt.gamma_sq 1e-5

precedence: defaults < --preset < --config file < remaining flags.
";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::NonFinite(_) | Error::Numerical(_) => 4,
    }
}

const SHORTHAND: &[(&str, &str)] = &[
    ("--arch", "experiment.arch"),
    ("--dataset", "experiment.dataset"),
    ("--data-dir", "experiment.data_dir"),
    ("--method", "experiment.method"),
    ("--scheme", "experiment.scheme"),
    ("--density", "experiment.density"),
    ("--seed", "experiment.seed"),
    ("--reps", "experiment.reps"),
    ("--out", "experiment.out"),
    ("--checkpoint", "experiment.checkpoint"),
    ("--records-dir", "experiment.records_dir"),
];

/// Build Settings from flag pairs after the subcommand. Presets apply first,
/// then a config file, then the remaining flags in the order given.
pub fn settings_from_args(args: &[String]) -> Result<Settings> {
    let mut preset = None;
    let mut config_path = None;
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let value = it
            .next()
            .ok_or_else(|| Error::Config(format!("flag {flag} expects a value")))?
            .clone();
        match flag.as_str() {
            "--preset" => preset = Some(value),
            "--config" => config_path = Some(value),
            _ => {
                if let Some(&(_, key)) = SHORTHAND.iter().find(|&&(f, _)| f == flag) {
                    overrides.push((key.to_string(), value));
                } else if let Some(key) = flag.strip_prefix("--") {
                    if !key.contains('.') {
                        return Err(Error::Config(format!("unknown flag {flag}")));
                    }
                    overrides.push((key.to_string(), value));
                } else {
                    return Err(Error::Config(format!("unknown argument {flag}")));
                }
            }
        }
    }
    let mut st = Settings::new();
    if let Some(name) = preset {
        st.apply_preset(&name)?;
    }
    if let Some(path) = config_path {
        st.load_file(std::path::Path::new(&path))?;
    }
    for (key, value) in &overrides {
        st.set(key, value)?;
    }
    Ok(st)
}

pub fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        print!("{USAGE}");
        return Err(Error::Config("missing command".into()));
    };
    match command.as_str() {
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            return Ok(());
        }
        _ => {}
    }
    let st = settings_from_args(&args[1..])?;
    match command.as_str() {
        "transfer" => commands::cmd_transfer(&st).map(drop),
        "prune" => commands::cmd_prune(&st).map(drop),
        "train" => commands::cmd_train(&st).map(drop),
        "probe" => commands::cmd_probe(&st).map(drop),
        "report" => commands::cmd_report(&st).map(drop),
        other => {
            print!("{USAGE}");
            Err(Error::Config(format!("unknown command `{other}`")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn shorthand_and_dotted_flags_reach_the_settings() {
        let st = settings_from_args(&strs(&[
            "--method",
            "random",
            "--density",
            "0.05",
            "--ntt.gamma_sq",
            "1e-5",
        ]))
        .unwrap();
        assert_eq!(st.get("experiment.method"), "random");
        assert_eq!(st.get("experiment.density"), "0.05");
        assert_eq!(st.get("ntt.gamma_sq"), "1e-5");
    }

    #[test]
    fn flags_override_preset_values() {
        let st = settings_from_args(&strs(&[
            "--preset",
            "toy-mlp",
            "--ntt.epochs",
            "12",
        ]))
        .unwrap();
        assert_eq!(st.get("experiment.arch"), "lenet-300-100-toy");
        assert_eq!(st.get("ntt.epochs"), "12");
        assert_eq!(st.get("train.loss"), "quadratic");
    }

    #[test]
    fn unknown_flag_is_a_config_error() {
        let err = settings_from_args(&strs(&["--bogus", "1"])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = settings_from_args(&strs(&["--density"])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn exit_codes_follow_error_kinds() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Shape("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 4);
    }
}
