//! The five pipeline commands: transfer, prune, train, probe, report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ntt_core::data::{
    binary_digit_subset, idx_pair_in_dir, load_cifar10_binary, load_idx, split_train_val,
    synthetic_digits_dataset, Dataset, SplitTag,
};
use ntt_core::network::{preset, Mask, Network};
use ntt_core::pruning::{logit_snip_scores, random_mask, select_mask, snip_scores};
use ntt_core::rng::Rng;
use ntt_core::training::{fmt_f64, train, History};
use ntt_core::transfer::{
    load_checkpoint, ntt_transfer, save_checkpoint, Unlabeled,
};
use ntt_core::{Error, Result, Tensor};

use crate::config::{ntt_config, train_config, train_loss, Experiment, Method, Settings};
use crate::record::{aggregate, ExperimentRecord, ReportTables};

fn load_split(st: &Settings, ex: &Experiment, split: SplitTag) -> Result<Dataset> {
    let ds = match ex.dataset.as_str() {
        "synthetic" => {
            let count = match split {
                SplitTag::Train => st.usize("data.train_count")?,
                _ => st.usize("data.test_count")?,
            };
            synthetic_digits_dataset(count, st.u64("data.seed")?, split)?
        }
        "mnist" | "fashion" => {
            let dir = ex.data_dir.as_deref().ok_or_else(|| {
                Error::Config(format!("--data-dir is required for dataset `{}`", ex.dataset))
            })?;
            let (images, labels) = idx_pair_in_dir(dir, split)?;
            load_idx(&images, &labels, split)?
        }
        "cifar10" => {
            let dir = ex.data_dir.as_deref().ok_or_else(|| {
                Error::Config("--data-dir is required for dataset `cifar10`".into())
            })?;
            load_cifar10_binary(dir, split)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown dataset `{other}` (available: synthetic, mnist, fashion, cifar10)"
            )))
        }
    };
    let cap = st.usize("data.subset")?;
    Ok(if split == SplitTag::Train && cap > 0 && cap < ds.len() {
        ds.take(cap, split)
    } else {
        ds
    })
}

fn check_input_width(net: &Network, ds: &Dataset) -> Result<()> {
    let want = net.input_shape().flat_len();
    if ds.input_dim() != want {
        return Err(Error::Config(format!(
            "architecture {} expects {want} inputs but the dataset provides {}",
            net.name(),
            ds.input_dim()
        )));
    }
    Ok(())
}

fn write_log(path: &Path, command: &str, stem: &str, wall: f64) -> Result<()> {
    std::fs::write(
        path,
        format!("command={command}\nrun={stem}\nwall_time_secs={wall:.3}\n"),
    )?;
    Ok(())
}

fn checkpoint_path(ex: &Experiment, seed: u64) -> PathBuf {
    ex.out.join(format!("{}.ntt", ex.stem(seed)))
}

/// Transfer: derive a sparse student from a dense teacher on label-free
/// inputs, one repetition per seed. Writes the checkpoint, the objective
/// trace CSV, and a timing sidecar per repetition.
pub fn cmd_transfer(st: &Settings) -> Result<Vec<PathBuf>> {
    let ex = Experiment::from_settings(st)?;
    if ex.method != Method::Ntt {
        return Err(Error::Config(format!(
            "transfer runs the ntt method; `{}` is produced by `prune`",
            ex.method.name()
        )));
    }
    std::fs::create_dir_all(&ex.out)?;
    let net = preset(&ex.arch)?;
    let train_ds = load_split(st, &ex, SplitTag::Train)?;
    check_input_width(&net, &train_ds)?;
    // Labels never reach the transfer loop: only the input stream is passed.
    let stream = Unlabeled::from_dataset(&train_ds);
    let mut written = Vec::new();
    for r in 0..ex.reps {
        let seed = ex.seed + r as u64;
        let started = Instant::now();
        let mut rng = Rng::new(seed);
        let theta0 = net.init_glorot(&mut rng);
        let cfg = ntt_config(st, ex.scheme, seed)?;
        let (mask, theta, report) = ntt_transfer(&net, &theta0, &stream, &cfg)?;
        let stem = ex.stem(seed);
        let ckpt = checkpoint_path(&ex, seed);
        save_checkpoint(&ckpt, net.name(), seed, &mask, &theta)?;
        std::fs::write(ex.out.join(format!("transfer_{stem}.csv")), report.to_csv())?;
        let wall = started.elapsed().as_secs_f64();
        write_log(&ex.out.join(format!("transfer_{stem}.log")), "transfer", &stem, wall)?;
        let (first, last) = match (report.rows.first(), report.rows.last()) {
            (Some(a), Some(b)) => (a.j, b.j),
            _ => (f64::NAN, f64::NAN),
        };
        println!(
            "transfer {stem}: J {} -> {} over {} iterations, density {:.4} ({wall:.1}s)",
            fmt_f64(first),
            fmt_f64(last),
            report.rows.len(),
            mask.density(&net)
        );
        written.push(ckpt);
    }
    Ok(written)
}

/// Prune: produce a baseline mask and initial parameters as a checkpoint,
/// one repetition per seed.
pub fn cmd_prune(st: &Settings) -> Result<Vec<PathBuf>> {
    let ex = Experiment::from_settings(st)?;
    if ex.method == Method::Ntt {
        return Err(Error::Config("the ntt method is produced by `transfer`, not `prune`".into()));
    }
    std::fs::create_dir_all(&ex.out)?;
    let net = preset(&ex.arch)?;
    let needs_data = matches!(ex.method, Method::Snip | Method::LayerwiseSnip | Method::LogitSnip);
    let scoring = if needs_data {
        let ds = load_split(st, &ex, SplitTag::Train)?;
        check_input_width(&net, &ds)?;
        let k = st.usize("data.score_batch")?.min(ds.len());
        Some(ds.take(k, SplitTag::Train))
    } else {
        None
    };
    let mut written = Vec::new();
    for r in 0..ex.reps {
        let seed = ex.seed + r as u64;
        let started = Instant::now();
        let mut rng = Rng::new(seed);
        let theta0 = match ex.method {
            Method::ScaledRandom => net.init_variance_scaled(&mut rng, ex.density)?,
            _ => net.init_glorot(&mut rng),
        };
        let mask = match ex.method {
            Method::Random | Method::ScaledRandom => random_mask(&net, ex.scheme, &mut rng)?,
            Method::Snip | Method::LayerwiseSnip => {
                let batch = scoring.as_ref().expect("scoring batch loaded");
                let scores = snip_scores(&net, &theta0, batch, train_loss(st)?)?;
                select_mask(&net, &scores, ex.scheme)?
            }
            Method::LogitSnip => {
                let batch = scoring.as_ref().expect("scoring batch loaded");
                let scores = logit_snip_scores(&net, &theta0, &batch.inputs)?;
                select_mask(&net, &scores, ex.scheme)?
            }
            Method::Dense => Mask::ones(&net),
            Method::Ntt => unreachable!(),
        };
        let stem = ex.stem(seed);
        let ckpt = checkpoint_path(&ex, seed);
        save_checkpoint(&ckpt, net.name(), seed, &mask, &theta0)?;
        let wall = started.elapsed().as_secs_f64();
        write_log(&ex.out.join(format!("prune_{stem}.log")), "prune", &stem, wall)?;
        println!(
            "prune {stem}: kept {} of {} weights (density {:.4})",
            mask.kept_weights(&net),
            net.weight_count(),
            mask.density(&net)
        );
        written.push(ckpt);
    }
    Ok(written)
}

/// Train: supervised learning from a checkpoint (dense runs may build their
/// initialization inline). Writes a History CSV, a record CSV, and a timing
/// sidecar per repetition.
pub fn cmd_train(st: &Settings) -> Result<Vec<ExperimentRecord>> {
    let ex = Experiment::from_settings(st)?;
    std::fs::create_dir_all(&ex.out)?;
    let net = preset(&ex.arch)?;
    let explicit_ckpt = st.get("experiment.checkpoint").to_string();
    if !explicit_ckpt.is_empty() && ex.reps > 1 {
        return Err(Error::Config(
            "--checkpoint pins one file; use --reps 1 or derived checkpoints".into(),
        ));
    }
    let full_train = load_split(st, &ex, SplitTag::Train)?;
    let test_ds = load_split(st, &ex, SplitTag::Test)?;
    check_input_width(&net, &full_train)?;
    let val_fraction = st.f64("train.val_fraction")?;
    let (_, dense_madds) = net.count_multiply_adds(None);
    let mut records = Vec::new();
    for r in 0..ex.reps {
        let seed = ex.seed + r as u64;
        let started = Instant::now();
        let (init, mask) = if !explicit_ckpt.is_empty() {
            load_student(Path::new(&explicit_ckpt), &net)?
        } else if ex.method == Method::Dense {
            let mut rng = Rng::new(seed);
            (net.init_glorot(&mut rng), Mask::ones(&net))
        } else {
            load_student(&checkpoint_path(&ex, seed), &net)?
        };
        let train_ds = if val_fraction > 0.0 {
            let mut vr = Rng::new(seed).stream(11);
            split_train_val(&full_train, val_fraction, &mut vr)?.0
        } else {
            full_train.clone()
        };
        let cfg = train_config(st, seed)?;
        let (_, history) = train(&net, &init, Some(&mask), &train_ds, &test_ds, &cfg)?;
        let last = history
            .final_row()
            .ok_or_else(|| Error::Numerical("training recorded no history".into()))?;
        let (_, madds) = net.count_multiply_adds(Some(&mask));
        let record = ExperimentRecord {
            method: ex.method.name().to_string(),
            density: ex.density,
            seed,
            final_train_acc: last.train_acc,
            final_test_acc: last.test_acc,
            kept_per_layer: mask.per_layer_kept(&net).iter().map(|&(k, _)| k as u64).collect(),
            multiply_adds: madds,
            dense_multiply_adds: dense_madds,
            speedup: dense_madds as f64 / madds as f64,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        let stem = ex.stem(seed);
        std::fs::write(ex.out.join(format!("history_{stem}.csv")), history.to_csv())?;
        std::fs::write(ex.out.join(format!("record_{stem}.csv")), record.to_csv())?;
        write_log(
            &ex.out.join(format!("train_{stem}.log")),
            "train",
            &stem,
            record.wall_time_secs,
        )?;
        println!(
            "train {stem}: train acc {:.4}, test acc {:.4}, speedup {:.2} ({:.1}s)",
            last.train_acc, last.test_acc, record.speedup, record.wall_time_secs
        );
        records.push(record);
    }
    Ok(records)
}

fn load_student(path: &Path, net: &Network) -> Result<(Tensor, Mask)> {
    let ckpt = load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    if ckpt.arch != net.name() {
        return Err(Error::Data(format!(
            "checkpoint {} was produced for architecture {}, not {}",
            path.display(),
            ckpt.arch,
            net.name()
        )));
    }
    let mask = ckpt.mask(net)?;
    Ok((ckpt.theta, mask))
}

/// One probed network's curves: the loss history of supervised training and
/// the mean output trajectory of each digit group.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub history: History,
    pub trace_iterations: Vec<u64>,
    /// traces[s][g]: mean output vector of group g at snapshot s.
    pub traces: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub seed: u64,
    pub teacher: ProbeRun,
    pub student: ProbeRun,
    pub random: ProbeRun,
}

fn trace_csv(run: &ProbeRun) -> String {
    use std::fmt::Write as _;
    let classes = run.traces.first().and_then(|s| s.first()).map_or(0, Vec::len);
    let groups = run.traces.first().map_or(0, Vec::len);
    let mut out = String::from("iteration");
    for g in 0..groups {
        for k in 0..classes {
            let _ = write!(out, ",class{g}_out{k}");
        }
    }
    out.push('\n');
    for (s, snap) in run.traces.iter().enumerate() {
        let _ = write!(out, "{}", run.trace_iterations[s]);
        for group in snap {
            for v in group {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
        }
        out.push('\n');
    }
    out
}

/// Probe: the toy visualization pipeline. Builds the two-digit regression
/// task, then trains the dense teacher, the transferred student, and a
/// random sparse network under the same supervised schedule, emitting loss
/// curves and per-class output traces for each.
pub fn cmd_probe(st: &Settings) -> Result<Vec<ProbeOutcome>> {
    let ex = Experiment::from_settings(st)?;
    std::fs::create_dir_all(&ex.out)?;
    let net = preset(&ex.arch)?;
    let base = load_split(st, &ex, SplitTag::Train)?;
    check_input_width(&net, &base)?;
    if net.class_count() != 2 {
        return Err(Error::Config(format!(
            "probe needs a two-output architecture, {} has {} outputs",
            net.name(),
            net.class_count()
        )));
    }
    let per_class = st.usize("probe.per_class")?;
    let task = binary_digit_subset(&base, (0, 1), per_class)?;
    let group_inputs: Vec<Tensor> = (0..2)
        .map(|class| {
            let rows: Vec<usize> = (0..task.len()).filter(|&i| task.label(i) == class).collect();
            task.inputs.gather_rows(&rows)
        })
        .collect();

    let mut outcomes = Vec::new();
    for r in 0..ex.reps {
        let seed = ex.seed + r as u64;
        let started = Instant::now();
        let mut rng = Rng::new(seed);
        let theta0 = net.init_glorot(&mut rng);

        let cfg = ntt_config(st, ex.scheme, seed)?;
        let stream = Unlabeled::from_dataset(&task);
        let (ntt_mask, ntt_theta, report) = ntt_transfer(&net, &theta0, &stream, &cfg)?;
        std::fs::write(
            ex.out.join(format!("probe_transfer_s{seed}.csv")),
            report.to_csv(),
        )?;

        let mut mask_rng = Rng::new(seed).stream(13);
        let rand_mask = random_mask(&net, ex.scheme, &mut mask_rng)?;

        let probe_one = |who: &str, init: &Tensor, mask: Option<&Mask>| -> Result<ProbeRun> {
            let run = probe_run(st, &net, init, mask, &task, &group_inputs, seed)?;
            std::fs::write(
                ex.out.join(format!("probe_loss_{who}_s{seed}.csv")),
                run.history.to_csv(),
            )?;
            std::fs::write(
                ex.out.join(format!("probe_trace_{who}_s{seed}.csv")),
                trace_csv(&run),
            )?;
            Ok(run)
        };
        let teacher = probe_one("teacher", &theta0, None)?;
        let student = probe_one("ntt", &ntt_theta, Some(&ntt_mask))?;
        let random = probe_one("random", &theta0, Some(&rand_mask))?;
        let wall = started.elapsed().as_secs_f64();
        write_log(&ex.out.join(format!("probe_s{seed}.log")), "probe", &ex.stem(seed), wall)?;
        let last = |run: &ProbeRun| run.history.final_row().map_or(f64::NAN, |r| r.train_loss);
        println!(
            "probe seed {seed}: final loss teacher {} | ntt {} | random {} ({wall:.1}s)",
            fmt_f64(last(&teacher)),
            fmt_f64(last(&student)),
            fmt_f64(last(&random))
        );
        outcomes.push(ProbeOutcome { seed, teacher, student, random });
    }
    Ok(outcomes)
}

/// Train once for the loss curve, then re-run the identical trajectory in
/// segments to snapshot parameters for the output traces. The toy schedule
/// is full-batch SGD, which is stateless, so segmenting reproduces the same
/// iterates exactly.
fn probe_run(
    st: &Settings,
    net: &Network,
    init: &Tensor,
    mask: Option<&Mask>,
    task: &Dataset,
    groups: &[Tensor],
    seed: u64,
) -> Result<ProbeRun> {
    let mut cfg = train_config(st, seed)?;
    cfg.eval_every = st.usize("probe.eval_every")?;
    let (_, history) = train(net, init, mask, task, task, &cfg)?;

    let points = st.usize("probe.trace_points")?.max(1);
    let total = cfg.epochs;
    let mut snapshots = vec![init.clone()];
    let mut trace_iterations = vec![0u64];
    let mut at = 0usize;
    let mut theta = init.clone();
    for p in 0..points {
        let next = total * (p + 1) / points;
        if next == at {
            continue;
        }
        let mut seg = cfg.clone();
        seg.epochs = next - at;
        let (after, _) = train(net, &theta, mask, task, task, &seg)?;
        theta = after;
        at = next;
        snapshots.push(theta.clone());
        trace_iterations.push(at as u64);
    }
    let traces = ntt_core::training::output_trace(net, &snapshots, mask, groups)?;
    Ok(ProbeRun { history, trace_iterations, traces })
}

/// Report: aggregate every record CSV under the records directory into the
/// summary and speedup tables, written next to them and printed.
pub fn cmd_report(st: &Settings) -> Result<ReportTables> {
    let ex = Experiment::from_settings(st)?;
    let dir = match st.get("experiment.records_dir") {
        "" => ex.out.clone(),
        d => PathBuf::from(d),
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::Data(format!("cannot read records dir {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("record_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no record_*.csv files under {}", dir.display())));
    }
    let mut records = Vec::new();
    for p in &paths {
        records.extend(ExperimentRecord::parse_csv(&std::fs::read_to_string(p)?, p)?);
    }
    let tables = aggregate(&records);
    std::fs::write(dir.join("summary.csv"), &tables.summary_csv)?;
    std::fs::write(dir.join("speedup.csv"), &tables.speedup_csv)?;
    print!("{}", render_table(&tables.summary_csv));
    println!();
    print!("{}", render_table(&tables.speedup_csv));
    Ok(tables)
}

fn render_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> =
            row.iter().enumerate().map(|(i, c)| format!("{c:<width$}", width = widths[i])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
