//! Flat key-value run configuration.
//!
//! Grammar: one `key = value` per line; blank lines and lines starting with
//! `#` are ignored; surrounding whitespace is trimmed. Every key is also a
//! command-line override, `--key=value` or `--key value`, applied after the
//! file named by `--config`. Unknown keys are errors. The value `auto`
//! selects a default that depends on other keys (usually the method).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use glad::dsa::{AugSettings, Strategy};
use glad::engine::{DistillConfig, Method, PixelInit, Space};
use glad::evalharness::EvalProtocol;
use glad::experts::ExpertHyper;
use glad::genweights::PretrainConfig;
use glad::microstyle::{GenSpec, InitMode};
use glad::nets::NetSpec;
use glad::objectives::MttConfig;

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run", "desk", "run name; outputs go to <out_dir>/<run>/"),
    ("out_dir", "out", "root of all run directories"),
    ("precision", "f32", "f32 or f64"),
    ("seed", "0", "base seed of the distillation run"),
    ("strict", "false", "fail on the first non-finite loss instead of skipping the step"),
    ("data", "out/data.bin", "dataset container path"),
    ("classes", "10", "glyph classes (gendata)"),
    ("per_class", "500", "images per class, 80% train (gendata)"),
    ("image_size", "32", "16, 32 or 64 (gendata)"),
    ("data_seed", "0", "dataset seed (gendata)"),
    ("experts", "out/experts.bin", "expert buffer path"),
    ("expert_count", "5", "expert trajectories to train"),
    ("expert_epochs", "15", "epochs per trajectory"),
    ("expert_lr", "0.01", "expert SGD learning rate"),
    ("expert_batch", "256", "expert minibatch size"),
    ("expert_seed", "0", "expert seed"),
    ("generator", "", "generator weights path; empty uses a random generator"),
    ("gen_seed", "0", "seed of the random generator"),
    ("generator_out", "out/generator.bin", "where pretrain-gen writes the weights"),
    ("pretrain_epochs", "20", "decoder pretraining epochs"),
    ("pretrain_lr", "0.01", "generator weight learning rate"),
    ("pretrain_code_lr", "1.0", "per-image code learning rate"),
    ("pretrain_batch", "32", "pretraining minibatch size"),
    ("backbone", "desk", "distillation backbone: desk (depth 3, width 64) or full (width 128)"),
    ("method", "dm", "dc, dm or mtt"),
    ("space", "f2", "pixel, wplus or f<n>"),
    ("ipc", "1", "images per class"),
    ("iterations", "5000", "distillation iterations"),
    ("latent_lr", "auto", "latent learning rate; auto: dc 10, dm 1, mtt 100"),
    ("alpha_lr", "1e-5", "learning rate of the synthetic step size"),
    ("momentum", "0.5", "latent optimizer momentum"),
    ("init_alpha", "0.01", "initial synthetic step size"),
    ("optimize_alpha", "auto", "learn the step size; auto: true for mtt"),
    ("clamp_pixels", "false", "clamp pixel-space images to [-1, 1] after each step"),
    ("latent_init", "feedforward", "feedforward or gaussian"),
    ("init_samples", "1024", "samples behind gaussian latent initialization"),
    ("pixel_init", "real", "real or noise"),
    ("real_batch", "auto", "real images per class per iteration; auto: 64"),
    ("gen_batch", "0", "images per generator pass; 0 renders the whole set at once"),
    ("mtt_n", "10", "student steps"),
    ("mtt_m", "2", "expert epochs spanned by a segment"),
    ("mtt_t_plus", "2", "latest segment start epoch"),
    ("mtt_syn_batch", "0", "images per student step; 0 uses all"),
    ("mtt_unrolled", "false", "differentiate the full unroll instead of the reverse replay"),
    ("dc_outer_loop", "auto", "network re-initialization period; auto: 1 for ipc 1, else 10"),
    ("dc_inner_loop", "auto", "network epochs on the synthetic set per update; auto: 1 for ipc 1, else 50"),
    ("dc_net_lr", "0.01", "learning rate of the matched network"),
    ("dc_per_layer", "false", "sum the cosine distance over weight tensors"),
    ("aug", "true", "differentiable siamese augmentation during distillation"),
    ("aug_ops", "color,crop,cutout,flip,scale,rotate", "augmentations to compose"),
    ("aug_strategy", "all", "all or single"),
    ("aug_seed", "0", "augmentation seed"),
    ("synset", "", "synthetic set path; empty uses <out_dir>/<run>/synset.bin"),
    ("eval_preset", "desk", "desk (50 + 50 epochs) or full (500 + 500)"),
    ("eval_repeats", "auto", "students per architecture; auto: 5"),
    ("eval_warmup", "auto", "warmup epochs; auto: from the preset"),
    ("eval_decay", "auto", "cosine epochs; auto: from the preset"),
    ("lr_convnet", "0.01", "student base learning rate for ConvNets"),
    ("lr_mlp", "0.01", "student base learning rate for the MLP"),
    ("lr_alt_convnet", "0.01", "student base learning rate for the unnormalized ConvNet"),
    ("eval_momentum", "0.9", "student momentum"),
    ("weight_decay", "5e-4", "student weight decay"),
    ("ema_decay", "0.999", "student weight EMA decay"),
    ("eval_batch", "256", "student minibatch size"),
    ("eval_aug", "true", "augment student training"),
    ("eval_seed", "0", "student seed"),
    ("sweep_spaces", "pixel,wplus,f0,f1,f2,f3,f4", "spaces visited by sweep-spaces"),
    ("report_runs", "", "runs aggregated by report; empty takes every run with an eval table"),
    ("grid_columns", "10", "images per row of exported grids"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<glad::Error> for ConfigError {
    fn from(e: glad::Error) -> Self {
        ConfigError(e.to_string())
    }
}

type CResult<T> = Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CResult<()> {
        let (k, _, _) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| ConfigError(format!("unknown config key `{key}`")))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a default")
    }

    pub fn parse_text(&mut self, text: &str, origin: &str) -> CResult<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| ConfigError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies `--config <file>` first, then every other override in order.
    pub fn from_args(args: &[String]) -> CResult<Self> {
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            let body = a
                .strip_prefix("--")
                .ok_or_else(|| ConfigError(format!("unexpected argument `{a}`; overrides look like --key=value")))?;
            if let Some((k, v)) = body.split_once('=') {
                pairs.push((k.replace('-', "_"), v.to_string()));
                i += 1;
            } else {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| ConfigError(format!("missing value for --{body}")))?;
                pairs.push((body.replace('-', "_"), v.clone()));
                i += 2;
            }
        }
        let mut cfg = RunConfig::default();
        for (_, path) in pairs.iter().filter(|(k, _)| k == "config") {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read config `{path}`: {e}")))?;
            cfg.parse_text(&text, path)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "config") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every key in the text grammar, sorted, for `config.echo`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> CResult<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| ConfigError(format!("`{key}`: cannot parse `{v}`")))
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, auto: T) -> CResult<T> {
        if self.get(key) == "auto" {
            Ok(auto)
        } else {
            self.parse(key)
        }
    }

    fn flag(&self, key: &str) -> CResult<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(ConfigError(format!("`{key}`: expected true or false, got `{v}`"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Parses and validates every key.
    pub fn resolve(&self) -> CResult<Settings> {
        let precision = match self.get("precision") {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            v => return Err(ConfigError(format!("`precision`: expected f32 or f64, got `{v}`"))),
        };
        let run = self.get("run").to_string();
        if run.is_empty() || run.contains(['/', '\\']) {
            return Err(ConfigError(format!("`run`: `{run}` is not a plain directory name")));
        }
        let out_dir = PathBuf::from(self.get("out_dir"));
        let classes: usize = self.parse("classes")?;
        let image_size: usize = self.parse("image_size")?;
        let method = Method::parse(self.get("method"))?;
        let space = Space::parse(self.get("space"))?;
        let ipc: usize = self.parse("ipc")?;
        let backbone = match self.get("backbone") {
            "desk" => Backbone::Desk,
            "full" => Backbone::Full,
            v => return Err(ConfigError(format!("`backbone`: expected desk or full, got `{v}`"))),
        };
        let aug = AugSettings {
            enabled: self.flag("aug")?,
            ops: AugSettings::parse_ops(self.get("aug_ops"))?,
            strategy: match self.get("aug_strategy") {
                "all" => Strategy::All,
                "single" => Strategy::SingleRandom,
                v => return Err(ConfigError(format!("`aug_strategy`: expected all or single, got `{v}`"))),
            },
            per_image: false,
            seed: self.parse("aug_seed")?,
        };
        let placeholder = NetSpec::desk_backbone(image_size, 3, classes);
        let mut distill = DistillConfig::desk(method, space, ipc, placeholder);
        distill.iterations = self.parse("iterations")?;
        distill.step.latent_lr = self.parse_or("latent_lr", distill.step.latent_lr)?;
        distill.step.alpha_lr = self.parse("alpha_lr")?;
        distill.step.momentum = self.parse("momentum")?;
        distill.step.optimize_alpha = match self.get("optimize_alpha") {
            "auto" => method == Method::Mtt,
            _ => self.flag("optimize_alpha")?,
        };
        distill.step.clamp_pixels = self.flag("clamp_pixels")?;
        distill.init_alpha = self.parse("init_alpha")?;
        distill.mtt = MttConfig {
            n: self.parse("mtt_n")?,
            m: self.parse("mtt_m")?,
            t_plus: self.parse("mtt_t_plus")?,
            syn_batch: self.parse("mtt_syn_batch")?,
        };
        distill.mtt_unrolled = self.flag("mtt_unrolled")?;
        distill.aug = aug.clone();
        distill.seed = self.parse("seed")?;
        distill.latent_init = InitMode::parse(self.get("latent_init"))?;
        distill.init_samples = self.parse("init_samples")?;
        distill.pixel_init = PixelInit::parse(self.get("pixel_init"))?;
        distill.real_batch = self.parse_or("real_batch", 64)?;
        distill.dc_outer_loop = self.parse_or("dc_outer_loop", distill.dc_outer_loop)?;
        distill.dc_inner_loop = self.parse_or("dc_inner_loop", distill.dc_inner_loop)?;
        distill.dc_net_lr = self.parse("dc_net_lr")?;
        distill.dc_per_layer = self.flag("dc_per_layer")?;
        distill.gen_batch = self.parse("gen_batch")?;
        if distill.step.latent_lr <= 0.0 {
            return Err(ConfigError("`latent_lr` must be positive".into()));
        }
        let mut eval = match self.get("eval_preset") {
            "desk" => EvalProtocol::desk(),
            "full" => EvalProtocol::full(),
            v => return Err(ConfigError(format!("`eval_preset`: expected desk or full, got `{v}`"))),
        };
        eval.repeats = self.parse_or("eval_repeats", eval.repeats)?;
        eval.warmup_epochs = self.parse_or("eval_warmup", eval.warmup_epochs)?;
        eval.decay_epochs = self.parse_or("eval_decay", eval.decay_epochs)?;
        eval.lr_convnet = self.parse("lr_convnet")?;
        eval.lr_mlp = self.parse("lr_mlp")?;
        eval.lr_alt_convnet = self.parse("lr_alt_convnet")?;
        eval.momentum = self.parse("eval_momentum")?;
        eval.weight_decay = self.parse("weight_decay")?;
        eval.ema_decay = self.parse("ema_decay")?;
        eval.batch = self.parse("eval_batch")?;
        eval.aug.enabled = self.flag("eval_aug")?;
        eval.validate()?;
        let sweep_spaces = self
            .get("sweep_spaces")
            .split(',')
            .map(|s| Space::parse(s.trim()))
            .collect::<glad::Result<Vec<_>>>()?;
        let report_runs = self
            .get("report_runs")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let settings = Settings {
            run,
            out_dir,
            precision,
            strict: self.flag("strict")?,
            data: PathBuf::from(self.get("data")),
            gen_data: GenData {
                classes,
                per_class: self.parse("per_class")?,
                image_size,
                seed: self.parse("data_seed")?,
            },
            experts: PathBuf::from(self.get("experts")),
            expert_hyper: ExpertHyper {
                epochs: self.parse("expert_epochs")?,
                lr: self.parse("expert_lr")?,
                batch: self.parse("expert_batch")?,
            },
            expert_count: self.parse("expert_count")?,
            expert_seed: self.parse("expert_seed")?,
            generator: self.path("generator"),
            gen_seed: self.parse("gen_seed")?,
            generator_out: PathBuf::from(self.get("generator_out")),
            pretrain: PretrainConfig {
                epochs: self.parse("pretrain_epochs")?,
                lr: self.parse("pretrain_lr")?,
                code_lr: self.parse("pretrain_code_lr")?,
                momentum: 0.9,
                batch: self.parse("pretrain_batch")?,
                seed: self.parse("gen_seed")?,
            },
            backbone,
            distill,
            synset: self.path("synset"),
            eval,
            eval_seed: self.parse("eval_seed")?,
            sweep_spaces,
            report_runs,
            grid_columns: self.parse("grid_columns")?,
        };
        settings.validate()?;
        Ok(settings)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenData {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// The typed, validated configuration.
#[derive(Clone, Debug)]
pub struct Settings {
    pub run: String,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub strict: bool,
    pub data: PathBuf,
    pub gen_data: GenData,
    pub experts: PathBuf,
    pub expert_hyper: ExpertHyper,
    pub expert_count: usize,
    pub expert_seed: u64,
    pub generator: Option<PathBuf>,
    pub gen_seed: u64,
    pub generator_out: PathBuf,
    pub pretrain: PretrainConfig,
    pub backbone: Backbone,
    /// Its `net` is a placeholder until the dataset is known.
    pub distill: DistillConfig,
    pub synset: Option<PathBuf>,
    pub eval: EvalProtocol,
    pub eval_seed: u64,
    pub sweep_spaces: Vec<Space>,
    pub report_runs: Vec<String>,
    pub grid_columns: usize,
}

impl Settings {
    fn validate(&self) -> CResult<()> {
        let g = &self.gen_data;
        if g.classes < 2 || g.per_class == 0 || ![16, 32, 64].contains(&g.image_size) {
            return Err(ConfigError("gendata needs classes >= 2, per_class >= 1 and image_size 16, 32 or 64".into()));
        }
        if self.expert_count == 0 || self.expert_hyper.epochs == 0 || self.expert_hyper.batch == 0 {
            return Err(ConfigError("expert_count, expert_epochs and expert_batch must be >= 1".into()));
        }
        if self.grid_columns == 0 {
            return Err(ConfigError("grid_columns must be >= 1".into()));
        }
        if self.distill.aug.enabled && self.distill.aug.ops.is_empty() {
            return Err(ConfigError("aug is on but aug_ops is empty".into()));
        }
        if self.distill.space != Space::Pixel || self.sweep_spaces.iter().any(|s| *s != Space::Pixel) {
            let blocks = GenSpec::desk(g.classes, 0).blocks;
            for s in std::iter::once(&self.distill.space).chain(&self.sweep_spaces) {
                if let Space::F(n) = s {
                    if self.generator.is_none() && *n > blocks {
                        return Err(ConfigError(format!("space f{n} exceeds the generator's {blocks} blocks")));
                    }
                }
            }
        }
        let mut d = self.distill.clone();
        d.net = self.backbone_for(g.image_size, 3, g.classes);
        d.validate()?;
        Ok(())
    }

    pub fn backbone_for(&self, image_size: usize, channels: usize, classes: usize) -> NetSpec {
        match self.backbone {
            Backbone::Desk => NetSpec::desk_backbone(image_size, channels, classes),
            Backbone::Full => NetSpec::full_backbone(image_size, channels, classes),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run)
    }

    pub fn synset_path(&self) -> PathBuf {
        self.synset.clone().unwrap_or_else(|| self.run_dir().join("synset.bin"))
    }

    pub fn with_run(&self, run: &str) -> Settings {
        Settings {
            run: run.to_string(),
            synset: None,
            ..self.clone()
        }
    }
}

/// One line per key with its default and description, for `--help`.
pub fn key_listing() -> String {
    let mut s = String::from("Config keys (file lines `key = value`, or overrides `--key=value`):\n");
    for (k, v, d) in KEYS {
        let _ = writeln!(s, "  {k:<16} [{v}] {d}");
    }
    s
}

pub fn ensure_dir(p: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(p)
}
