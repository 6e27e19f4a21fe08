use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use distillforge::data::{split, Scaler};
use distillforge::dtree::fit_tree;
use distillforge::harness::report::{self, unix_now, Metadata};
use distillforge::harness::{self, load_dataset_spec, ExperimentConfig};
use distillforge::metrics::r2;
use distillforge::symreg::{evolve, DistillationSet};
use distillforge::teacher::{train, SavedTeacher};
use distillforge::Error;

#[derive(Parser)]
#[command(name = "distillforge", version, about = "Teacher regularization and symbolic distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one teacher and save it as JSON.
    Train {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a saved teacher into a symbolic or tree student.
    Distill {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "sr")]
        student: Student,
        #[arg(long)]
        out: PathBuf,
    },
    /// Symbolic distillation over the λ grid and seeds.
    Sweep {
        #[command(flatten)]
        common: Overrides,
    },
    /// Label-noise ablation over the σ grid.
    AblateNoise {
        #[command(flatten)]
        common: Overrides,
    },
    /// Tree students from a standard and a regularized teacher.
    TreeCompare {
        #[command(flatten)]
        common: Overrides,
    },
    /// Linear signal-to-noise proxy for one or more datasets, as CSV.
    Snr {
        /// CSV paths or bundled dataset keys.
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<String>,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Teacher and both students on a 1-D synthetic function, as an XY CSV.
    DemoGap {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Student {
    Sr,
    Tree,
}

/// Flags shared by the experiment commands. Each one overrides the config file.
#[derive(Args, Default)]
struct Overrides {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV path or bundled dataset key.
    #[arg(long = "data", alias = "dataset")]
    dataset: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_delimiter = ',')]
    categorical: Option<Vec<String>>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sigma_grid: Option<Vec<f64>>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    tree_lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    population_size: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    max_leaves: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.dataset {
            c.dataset = v.clone();
        }
        if let Some(v) = &self.target {
            c.target = Some(v.clone());
        }
        if let Some(v) = &self.categorical {
            c.categorical = Some(v.clone());
        }
        if let Some(v) = &self.data_dir {
            c.data_dir = v.clone();
        }
        if let Some(v) = &self.out_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = &self.lambda_grid {
            c.lambda_grid = v.clone();
        }
        if let Some(v) = &self.sigma_grid {
            c.sigma_grid = v.clone();
        }
        if let Some(v) = self.test_fraction {
            c.test_fraction = v;
        }
        if let Some(v) = self.tree_lambda {
            c.tree_lambda = v;
        }
        if let Some(v) = self.epochs {
            c.teacher.epochs = v;
        }
        if let Some(v) = self.hidden_width {
            c.teacher.hidden_width = v;
        }
        if let Some(v) = self.learning_rate {
            c.teacher.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.teacher.batch_size = v;
        }
        if let Some(v) = self.population_size {
            c.gp.population_size = v;
        }
        if let Some(v) = self.generations {
            c.gp.generations = v;
        }
        if let Some(v) = self.max_leaves {
            c.tree.max_leaves = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("{}", f.display());
    }
}

fn to_json(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn cmd_train(common: &Overrides, lambda: Option<f64>, seed: Option<u64>, out: &Path) -> Result<(), Error> {
    let mut cfg = common.resolve()?;
    if let Some(l) = lambda {
        cfg.teacher.lambda = l;
    }
    if let Some(s) = seed {
        cfg.teacher.seed = s;
    }
    cfg.teacher.validate()?;
    let ds = cfg.load_dataset()?;
    let seed = cfg.teacher.seed;
    let sp = split(&ds, cfg.test_fraction, seed)?;
    let scaler = Scaler::fit(&ds.x, &sp.train)?;
    let train_ds = ds.subset(&sp.train);
    let test_ds = ds.subset(&sp.test);
    let x_train = scaler.transform(&train_ds.x);
    let x_test = scaler.transform(&test_ds.x);
    let (model, stats) = train(&x_train, &train_ds.y, &cfg.teacher)?;
    let r2_train = r2(&train_ds.y, &model.predict_batch(&x_train)?)?;
    let r2_test = r2(&test_ds.y, &model.predict_batch(&x_test)?)?;
    let saved = SavedTeacher {
        model,
        scaler,
        seed,
        lambda: cfg.teacher.lambda,
        test_fraction: cfg.test_fraction,
    };
    report::write_text(out, &(saved.to_json() + "\n"))?;
    eprintln!(
        "teacher: lambda={} seed={} r2_train={:.4} r2_test={:.4} ({:.2}s)",
        saved.lambda, seed, r2_train, r2_test, stats.wall_time_seconds
    );
    println!("{}", out.display());
    Ok(())
}

fn cmd_distill(common: &Overrides, model_path: &Path, student: Student, out: &Path) -> Result<(), Error> {
    let cfg = common.resolve()?;
    let saved = SavedTeacher::load(model_path).map_err(|e| Error::from(e).context(model_path.display().to_string()))?;
    let ds = cfg.load_dataset()?;
    if ds.n_features() != saved.model.input_dim() {
        return Err(Error::Config(format!(
            "model expects {} features, dataset has {}",
            saved.model.input_dim(),
            ds.n_features()
        )));
    }
    let sp = split(&ds, saved.test_fraction, saved.seed)?;
    let train_ds = ds.subset(&sp.train);
    let test_ds = ds.subset(&sp.test);
    let x_train = saved.scaler.transform(&train_ds.x);
    let x_test = saved.scaler.transform(&test_ds.x);
    let teacher_train = saved.model.predict_batch(&x_train)?;
    let teacher_test = saved.model.predict_batch(&x_test)?;
    let dset = DistillationSet::new(x_train, teacher_train)?;

    let (student_name, result, pred) = match student {
        Student::Sr => {
            let mut gcfg = cfg.gp.clone();
            gcfg.seed = saved.seed;
            let res = evolve(&dset, &gcfg)?;
            let pred: Vec<f64> = x_test.iter_rows().map(|r| res.best_tree.eval(r)).collect();
            let v: serde_json::Value = serde_json::from_str(&res.to_json()).expect("valid json");
            ("sr", v, pred)
        }
        Student::Tree => {
            let tree = fit_tree(&dset, &cfg.tree)?;
            let pred = tree.predict(&x_test)?;
            let v = serde_json::json!({
                "leaves": tree.leaf_count(),
                "tree": tree.to_json_value(),
            });
            ("tree", v, pred)
        }
    };
    let summary = serde_json::json!({
        "dataset": ds.name,
        "student": student_name,
        "seed": saved.seed,
        "lambda": saved.lambda,
        "teacher_r2_test": r2(&test_ds.y, &teacher_test)?,
        "student_r2_test": r2(&test_ds.y, &pred)?,
        "fidelity_r2": r2(&teacher_test, &pred)?,
        "result": result,
    });
    report::write_text(out, &to_json(&summary))?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_sweep(common: &Overrides) -> Result<(), Error> {
    let cfg = common.resolve()?;
    let ds = cfg.load_dataset()?;
    let started = unix_now();
    let r = harness::sweep(&ds, &cfg);
    let meta = Metadata::new("sweep", started, r.timings.clone());
    print_files(&report::write_sweep(&cfg.output_dir, &r, &meta)?);
    if let Some(b) = &r.best {
        eprintln!(
            "{}: lambda=0 student r2 {:.4}; best lambda={} student r2 {:.4} ({:+.4})",
            r.dataset, b.baseline_student_r2, b.best_lambda, b.best_student_r2, b.improvement_abs
        );
    }
    let failed = r.rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see sweep_rows.csv", r.rows.len());
    }
    Ok(())
}

fn cmd_ablate(common: &Overrides) -> Result<(), Error> {
    let cfg = common.resolve()?;
    let ds = cfg.load_dataset()?;
    let started = unix_now();
    let r = harness::noise_ablation(&ds, &cfg);
    let meta = Metadata::new("ablate-noise", started, r.timings.clone());
    print_files(&report::write_ablation(&cfg.output_dir, &r, &meta)?);
    Ok(())
}

fn cmd_tree(common: &Overrides) -> Result<(), Error> {
    let cfg = common.resolve()?;
    let ds = cfg.load_dataset()?;
    let started = unix_now();
    let r = harness::tree_experiment(&ds, cfg.tree_lambda, &cfg);
    let meta = Metadata::new("tree-compare", started, r.timings.clone());
    print_files(&report::write_tree(&cfg.output_dir, &r, &meta)?);
    Ok(())
}

fn cmd_snr(data: &[String], data_dir: &Path, out: Option<&Path>) -> Result<(), Error> {
    let mut sets = Vec::with_capacity(data.len());
    for d in data {
        sets.push(load_dataset_spec(d, data_dir, None, None).map_err(|e| e.context(d.clone()))?);
    }
    let mut rows = Vec::new();
    let mut first_err = None;
    for r in harness::snr_command(&sets) {
        match r {
            Ok(row) => rows.push(row),
            Err((name, e)) => {
                eprintln!("{name}: {e}");
                first_err.get_or_insert(e.context(name));
            }
        }
    }
    let csv = report::snr_csv(&rows)?;
    match out {
        Some(p) => {
            report::write_text(p, &csv)?;
            println!("{}", p.display());
        }
        None => print!("{csv}"),
    }
    first_err.map_or(Ok(()), Err)
}

fn cmd_demo(common: &Overrides, n: usize, seed: u64) -> Result<(), Error> {
    let cfg = common.resolve()?;
    let r = harness::demo_gap(n, seed, &cfg)?;
    print_files(&report::write_demo_gap(&cfg.output_dir, &r)?);
    eprintln!(
        "teacher r2 {:.4}, symbolic r2 {:.4}, tree r2 {:.4}",
        r.teacher_r2, r.symbolic_r2, r.tree_r2
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Cmd::Train {
            common,
            lambda,
            seed,
            out,
        } => cmd_train(common, *lambda, *seed, out),
        Cmd::Distill {
            common,
            model,
            student,
            out,
        } => cmd_distill(common, model, *student, out),
        Cmd::Sweep { common } => cmd_sweep(common),
        Cmd::AblateNoise { common } => cmd_ablate(common),
        Cmd::TreeCompare { common } => cmd_tree(common),
        Cmd::Snr { data, data_dir, out } => cmd_snr(data, data_dir, out.as_deref()),
        Cmd::DemoGap { common, n, seed } => cmd_demo(common, *n, *seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
