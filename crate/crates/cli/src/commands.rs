//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glad::datakit::{export_image_grid, gen_glyph_dataset, load_dataset, save_dataset, Dataset, Split};
use glad::engine::{distill, load_synset, save_synset, DistillConfig, Space, SynSet};
use glad::evalharness::{cross_arch_eval, desk_unseen_archs, markdown_table, tsv_table, EvalReport};
use glad::experts::{load_buffer, save_buffer, train_experts, TrajBuffer};
use glad::genweights::{load_generator, pretrain_glo, save_generator};
use glad::microstyle::{GenSpec, Generator};
use glad::nets::{accuracy, ParamVector};
use glad::{Error, Scalar};

use crate::config::{ensure_dir, Precision, RunConfig, Settings};
use crate::Command;

#[derive(Debug)]
pub enum Failure {
    /// Invalid configuration or missing inputs; exit code 2.
    Config(String),
    /// Anything that went wrong while working; exit code 1.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<bool, Failure>;

pub fn run(cmd: Command, s: &Settings, cfg: &RunConfig) -> Outcome {
    glad::tensor::set_strict(s.strict);
    match s.precision {
        Precision::F32 => run_typed::<f32>(cmd, s, cfg),
        Precision::F64 => run_typed::<f64>(cmd, s, cfg),
    }
}

fn run_typed<T: Scalar>(cmd: Command, s: &Settings, cfg: &RunConfig) -> Outcome {
    let start = Instant::now();
    let ok = match cmd {
        Command::Gendata => gendata(s)?,
        Command::TrainExperts => train_experts_cmd::<T>(s)?,
        Command::PretrainGen => pretrain_gen::<T>(s)?,
        Command::Distill => distill_cmd::<T>(s, cfg)?,
        Command::Eval => eval_cmd::<T>(s, cfg)?,
        Command::Export => export_cmd::<T>(s)?,
        Command::Report => report_cmd(s)?,
        Command::SweepSpaces => sweep_cmd::<T>(s, cfg)?,
        Command::Selftest => selftest_cmd(),
    };
    if !matches!(cmd, Command::Selftest | Command::Gendata) {
        log_timing(&s.out_dir, &format!("{cmd:?} run={}", s.run), start)?;
    }
    Ok(ok)
}

/// Wall-clock times go to a sidecar log so that every other output is a
/// pure function of the configuration.
fn log_timing(out_dir: &Path, what: &str, start: Instant) -> Result<(), Failure> {
    ensure_dir(out_dir)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(out_dir.join("timing.log"))?;
    writeln!(f, "{what}\t{:.3}s", start.elapsed().as_secs_f64())?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(p)?;
    }
    Ok(())
}

fn require(path: &Path, what: &str, hint: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{what} `{}` not found; {hint}", path.display())))
    }
}

fn load_data(s: &Settings) -> Result<Dataset, Failure> {
    require(&s.data, "dataset", "run `glad gendata` first")?;
    Ok(load_dataset(&s.data)?)
}

fn load_experts(s: &Settings) -> Result<TrajBuffer, Failure> {
    require(&s.experts, "expert buffer", "run `glad train-experts` first")?;
    Ok(load_buffer(&s.experts)?)
}

/// The desk generator resized to the dataset's geometry.
fn gen_spec(data: &Dataset, seed: u64) -> GenSpec {
    let mut g = GenSpec::desk(data.classes, seed);
    g.out_size = data.size;
    g.base_size = data.size >> g.blocks;
    g.image_channels = data.channels;
    g
}

/// Pretrained weights when `generator` is set, otherwise the seeded random
/// generator.
fn generator<T: Scalar>(s: &Settings, data: &Dataset) -> Result<Generator<T>, Failure> {
    let g = match &s.generator {
        Some(path) => {
            require(path, "generator", "run `glad pretrain-gen` or leave `generator` empty")?;
            load_generator::<T>(path)?
        }
        None => Generator::random(gen_spec(data, s.gen_seed))?,
    };
    let spec = &g.spec;
    if spec.classes != data.classes || spec.out_size != data.size || spec.image_channels != data.channels {
        return Err(Failure::Config("generator does not match the dataset".into()));
    }
    Ok(g)
}

fn write_echo(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    ensure_dir(dir)?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    Ok(())
}

fn gendata(s: &Settings) -> Outcome {
    let g = &s.gen_data;
    let ds = gen_glyph_dataset(g.classes, g.per_class, g.image_size, g.seed)?;
    ensure_parent(&s.data)?;
    save_dataset(&ds, &s.data)?;
    println!(
        "wrote {}: {} classes, {} train and {} val images of {}x{}",
        s.data.display(),
        ds.classes,
        ds.train_count,
        ds.len() - ds.train_count,
        ds.size,
        ds.size
    );
    Ok(true)
}

fn train_experts_cmd<T: Scalar>(s: &Settings) -> Outcome {
    let data = load_data(s)?;
    let net = s.backbone_for(data.size, data.channels, data.classes);
    let buffer = train_experts::<T>(&data, &net, &s.expert_hyper, s.expert_count, s.expert_seed)?;
    ensure_parent(&s.experts)?;
    save_buffer(&buffer, &s.experts)?;
    let (vx, vy) = data.split_tensor::<T>(Split::Val);
    for (i, t) in buffer.trajectories.iter().enumerate() {
        let last = t.last().expect("trajectories are non-empty");
        let p = ParamVector::<T>::new(last.values.iter().map(|&v| T::of(v)).collect(), last.layout.clone())?;
        println!("expert {i}: val accuracy {:.1}%", 100.0 * accuracy(&net, &p, &vx, &vy)?);
    }
    println!(
        "wrote {}: {} trajectories of {} snapshots ({})",
        s.experts.display(),
        buffer.trajectories.len(),
        buffer.snapshots_per_trajectory(),
        net.label()
    );
    Ok(true)
}

fn pretrain_gen<T: Scalar>(s: &Settings) -> Outcome {
    let data = load_data(s)?;
    let (g, losses) = pretrain_glo::<T>(&data, gen_spec(&data, s.gen_seed), &s.pretrain)?;
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {e}: reconstruction {l:.6}");
    }
    ensure_parent(&s.generator_out)?;
    save_generator(&g, &s.generator_out)?;
    println!("wrote {}", s.generator_out.display());
    Ok(true)
}

/// Distills into `s.run_dir()` and returns the synthetic set.
fn distill_into<T: Scalar>(s: &Settings, cfg: &RunConfig, data: &Dataset) -> Result<SynSet<T>, Failure> {
    let dir = s.run_dir();
    write_echo(&dir, cfg)?;
    let dcfg = DistillConfig {
        net: s.backbone_for(data.size, data.channels, data.classes),
        ..s.distill.clone()
    };
    let g = match dcfg.space {
        Space::Pixel => None,
        _ => Some(generator::<T>(s, data)?),
    };
    let experts = match dcfg.method {
        glad::engine::Method::Mtt => Some(load_experts(s)?),
        _ => None,
    };
    let out = distill(&dcfg, data, g.as_ref(), experts.as_ref(), None)?;
    save_synset(&out.synset, &dir.join("synset.bin"))?;
    let mut log = String::from("iteration\tloss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(log, "{i}\t{l:.9e}");
    }
    fs::write(dir.join("losses.tsv"), log)?;
    let grids = dir.join("grids");
    ensure_dir(&grids)?;
    export_image_grid(&out.synset.render(g.as_ref())?, &grids.join("synset.ppm"), s.grid_columns)?;
    let tail = &out.losses[out.losses.len().saturating_sub(10)..];
    println!(
        "{} in {}: {} images, {} iterations, final loss {:.4}",
        dcfg.method.name(),
        dcfg.space.name(),
        out.synset.len(),
        out.losses.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    Ok(out.synset)
}

fn distill_cmd<T: Scalar>(s: &Settings, cfg: &RunConfig) -> Outcome {
    let data = load_data(s)?;
    distill_into::<T>(s, cfg, &data)?;
    println!("wrote {}", s.run_dir().display());
    Ok(true)
}

fn load_run_synset<T: Scalar>(s: &Settings, data: &Dataset) -> Result<(SynSet<T>, Option<Generator<T>>), Failure> {
    let path = s.synset_path();
    require(&path, "synthetic set", "run `glad distill` first")?;
    let syn = load_synset::<T>(&path)?;
    if syn.classes != data.classes {
        return Err(Failure::Config(format!(
            "synthetic set has {} classes, the dataset {}",
            syn.classes, data.classes
        )));
    }
    let g = match syn.space {
        Space::Pixel => None,
        _ => Some(generator::<T>(s, data)?),
    };
    syn.check_generator(g.as_ref())?;
    Ok((syn, g))
}

/// Evaluates the synthetic set on the backbone followed by the unseen
/// architectures, writing `eval.tsv` and `report.md` into the run directory.
fn evaluate<T: Scalar>(s: &Settings, data: &Dataset, syn: &SynSet<T>, g: Option<&Generator<T>>) -> Result<EvalReport, Failure> {
    let mut archs = vec![s.backbone_for(data.size, data.channels, data.classes)];
    archs.extend(desk_unseen_archs(data.size, data.channels, data.classes));
    let images = syn.render(g)?;
    let report = cross_arch_eval(&images, &syn.labels(), &archs, &s.eval, data, s.eval_seed)?;
    let dir = s.run_dir();
    ensure_dir(&dir)?;
    fs::write(dir.join("eval.tsv"), report.to_tsv())?;
    let rows = [(s.run.clone(), report.clone())];
    fs::write(dir.join("report.md"), report_markdown(&rows))?;
    Ok(report)
}

/// The backbone table followed by the unseen-architecture table.
fn report_markdown(rows: &[(String, EvalReport)]) -> String {
    let (backbone, unseen): (Vec<_>, Vec<_>) = rows
        .iter()
        .map(|(name, r)| {
            let (b, u) = r.split_backbone();
            ((name.clone(), b), (name.clone(), u))
        })
        .unzip();
    format!(
        "## Distillation backbone\n\n{}\n## Unseen architectures\n\n{}",
        markdown_table(&backbone),
        markdown_table(&unseen)
    )
}

fn eval_cmd<T: Scalar>(s: &Settings, cfg: &RunConfig) -> Outcome {
    let data = load_data(s)?;
    let (syn, g) = load_run_synset::<T>(s, &data)?;
    write_echo(&s.run_dir(), cfg)?;
    let report = evaluate(s, &data, &syn, g.as_ref())?;
    print!("{}", report_markdown(&[(s.run.clone(), report)]));
    Ok(true)
}

fn export_cmd<T: Scalar>(s: &Settings) -> Outcome {
    let data = load_data(s)?;
    let (syn, g) = load_run_synset::<T>(s, &data)?;
    let grids = s.run_dir().join("grids");
    ensure_dir(&grids)?;
    export_image_grid(&syn.render(g.as_ref())?, &grids.join("synset.ppm"), s.grid_columns)?;
    let per_class = s.grid_columns.max(1);
    let idx: Vec<usize> = (0..data.classes)
        .flat_map(|c| data.class_indices(Split::Train, c).into_iter().take(per_class))
        .collect();
    export_image_grid(&data.batch::<T>(&idx), &grids.join("real.ppm"), per_class)?;
    println!("wrote {} and {}", grids.join("synset.ppm").display(), grids.join("real.ppm").display());
    Ok(true)
}

/// Runs listed in `report_runs`, or every run directory holding an eval table.
fn report_rows(s: &Settings) -> Result<Vec<(String, EvalReport)>, Failure> {
    let names: Vec<String> = if s.report_runs.is_empty() {
        let mut v = Vec::new();
        if s.out_dir.is_dir() {
            for e in fs::read_dir(&s.out_dir)? {
                let e = e?;
                if e.path().join("eval.tsv").is_file() {
                    v.push(e.file_name().to_string_lossy().into_owned());
                }
            }
        }
        v.sort();
        v
    } else {
        s.report_runs.clone()
    };
    if names.is_empty() {
        return Err(Failure::Config(format!("no evaluated runs under `{}`", s.out_dir.display())));
    }
    let mut rows = Vec::new();
    for name in names {
        let path: PathBuf = s.out_dir.join(&name).join("eval.tsv");
        require(&path, "eval table", "run `glad eval` for that run first")?;
        rows.push((name, EvalReport::from_tsv(&fs::read_to_string(&path)?)?));
    }
    Ok(rows)
}

fn report_cmd(s: &Settings) -> Outcome {
    let rows = report_rows(s)?;
    let labels = |r: &EvalReport| r.archs.iter().map(|a| a.arch.clone()).collect::<Vec<_>>();
    let first = labels(&rows[0].1);
    let (same, other): (Vec<_>, Vec<_>) = rows.into_iter().partition(|(_, r)| labels(r) == first);
    for (name, _) in &other {
        eprintln!("glad: skipping run `{name}`: evaluated on a different architecture set");
    }
    let md = report_markdown(&same);
    ensure_dir(&s.out_dir)?;
    fs::write(s.out_dir.join("report.md"), &md)?;
    fs::write(s.out_dir.join("report.tsv"), tsv_table(&same))?;
    print!("{md}");
    Ok(true)
}

fn sweep_cmd<T: Scalar>(s: &Settings, cfg: &RunConfig) -> Outcome {
    let data = load_data(s)?;
    let mut rows = Vec::new();
    for &space in &s.sweep_spaces {
        let mut sub = s.with_run(&format!("{}-{}", s.run, space.name()));
        sub.distill.space = space;
        let mut sub_cfg = cfg.clone();
        sub_cfg.set("run", &sub.run).map_err(|e| Failure::Config(e.0))?;
        sub_cfg.set("space", &space.name()).map_err(|e| Failure::Config(e.0))?;
        let syn = distill_into::<T>(&sub, &sub_cfg, &data)?;
        let g = match space {
            Space::Pixel => None,
            _ => Some(generator::<T>(&sub, &data)?),
        };
        let report = evaluate(&sub, &data, &syn, g.as_ref())?;
        println!(
            "{}: backbone {:.1}%, cross-arch mean {:.1}%",
            space.name(),
            100.0 * report.archs[0].mean(),
            100.0 * report.split_backbone().1.cross_arch_mean()
        );
        rows.push((space.name(), report));
    }
    let dir = s.run_dir();
    write_echo(&dir, cfg)?;
    let md = report_markdown(&rows);
    fs::write(dir.join("sweep.md"), &md)?;
    let unseen: Vec<_> = rows.iter().map(|(n, r)| (n.clone(), r.split_backbone().1)).collect();
    fs::write(dir.join("sweep.tsv"), tsv_table(&unseen))?;
    print!("{md}");
    Ok(true)
}

fn selftest_cmd() -> bool {
    let checks = glad::selftest::quick_suite();
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    failed == 0
}
