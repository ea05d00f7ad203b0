//! Command-line front end.
//!
//! Precedence for every setting: command-line flag, then the TOML config
//! file, then the built-in default. `LATENT_ATLAS_SEED`, when set, replaces
//! the seed of whichever command runs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::editing::{
    ganspace_directions, interfacegan_direction, random_direction, BankMeta, DirectionBank, DirectionSpace,
    Method, SvmConfig,
};
use crate::encoder::{train_encoder, EncoderConfig, EncoderModel, EncoderTrainConfig};
use crate::error::{AtlasError, Result};
use crate::eval::{alpha_grid, editing_sweep, reconstruction_benchmark, EvalReport, Models, Target};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::imaging::Image;
use crate::inversion::{invert, save_result, InversionConfig};
use crate::rng;
use crate::spaces::{fit_pn_whitener, load_latent, sample_z_batch, save_latent, PnWhitener, Space, ZCode};
use crate::toy::{AttributeProbe, ToyDataset};
use crate::training::{history_csv, train_generator, GanTrainConfig};

pub const SEED_ENV: &str = "LATENT_ATLAS_SEED";

#[derive(Parser, Debug)]
#[command(name = "latent-atlas", version, about = "GAN inversion and latent editing toolkit")]
pub struct Cli {
    /// Worker threads for independent benchmark cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the toy generator.
    TrainGen(TrainGenArgs),
    /// Train the feature encoder on generator samples.
    TrainEncoder(TrainEncoderArgs),
    /// Invert one image into a latent space.
    Invert(InvertArgs),
    /// Apply a direction to a stored code.
    Edit(EditArgs),
    /// Discover editing directions.
    Directions(DirectionsArgs),
    /// Run the reconstruction benchmark and editing sweeps.
    Eval(EvalArgs),
    /// Fit the Pn whitener.
    Whiten(WhitenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Z,
    ZPlus,
    W,
    WPlus,
    FZ,
    FZPlus,
    FWPlus,
    FWPlusPn,
}

impl From<SpaceArg> for Space {
    fn from(s: SpaceArg) -> Space {
        match s {
            SpaceArg::Z => Space::Z,
            SpaceArg::ZPlus => Space::ZPlus,
            SpaceArg::W => Space::W,
            SpaceArg::WPlus => Space::WPlus,
            SpaceArg::FZ => Space::FZ,
            SpaceArg::FZPlus => Space::FZPlus,
            SpaceArg::FWPlus => Space::FWPlus,
            SpaceArg::FWPlusPn => Space::FWPlusPn,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainGenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum)]
    pub space: SpaceArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Encoder checkpoint; required for hybrid spaces unless --no-encoder.
    #[arg(long)]
    pub enc: Option<PathBuf>,
    /// Start hybrid inversions from a zero feature map (ablation).
    #[arg(long)]
    pub no_encoder: bool,
    /// Pn whitener JSON; fitted on the fly for FW_PLUS_PN when absent.
    #[arg(long)]
    pub whitener: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_per: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub lambda_pn: Option<f64>,
    #[arg(long)]
    pub split_layer: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A `.lat` code, e.g. the `code.lat` written by `invert`.
    #[arg(long)]
    pub code: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Direction name or index in the bank.
    #[arg(long, default_value = "0")]
    pub direction: String,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ganspace,
    Interfacegan,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirSpaceArg {
    Z,
    W,
}

#[derive(Args, Debug)]
pub struct DirectionsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Number of directions (GANSpace components or random draws).
    #[arg(long, default_value_t = 4)]
    pub components: usize,
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    /// Attribute for InterfaceGAN: smile or hair.
    #[arg(long, default_value = "smile")]
    pub attribute: String,
    /// Space the InterfaceGAN or random directions live in.
    #[arg(long, value_enum, default_value = "z")]
    pub space: DirSpaceArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output bank JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub enc: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fill the wall_s column of recon.csv (makes reruns differ).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug)]
pub struct WhitenArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// `train-gen` config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainGenFile {
    pub generator: Option<GeneratorConfig>,
    pub training: GanTrainConfig,
}

/// `train-encoder` config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainEncoderFile {
    pub training: EncoderTrainConfig,
    pub init_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    Generator,
    Toy,
}

/// `eval` config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub seed: u64,
    pub num_targets: usize,
    pub sources: Vec<TargetSource>,
    pub spaces: Vec<Space>,
    pub inversion: InversionConfig,
    /// Spaces whose inversions are swept along GANSpace directions.
    pub sweep_spaces: Vec<Space>,
    pub sweep_components: usize,
    pub sweep_targets: usize,
    pub ganspace_samples: usize,
    pub whitener_samples: usize,
    pub toy_seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_targets: 8,
            sources: vec![TargetSource::Generator, TargetSource::Toy],
            spaces: vec![Space::Z, Space::ZPlus, Space::FZPlus, Space::FWPlus],
            inversion: InversionConfig::default(),
            sweep_spaces: vec![Space::FZPlus, Space::FWPlusPn],
            sweep_components: 3,
            sweep_targets: 8,
            ganspace_samples: 20_000,
            whitener_samples: 100_000,
            toy_seed: 1,
        }
    }
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
    toml::from_str(&text).map_err(|e| AtlasError::Config(format!("{}: {}", path.display(), e.message())))
}

/// The seed from `LATENT_ATLAS_SEED` when set, else `fallback`.
pub fn effective_seed(fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| AtlasError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| AtlasError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| AtlasError::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainGen(a) => cmd_train_gen(&a),
        Command::TrainEncoder(a) => cmd_train_encoder(&a),
        Command::Invert(a) => cmd_invert(&a),
        Command::Edit(a) => cmd_edit(&a),
        Command::Directions(a) => cmd_directions(&a),
        Command::Eval(a) => cmd_eval(&a, cli.jobs),
        Command::Whiten(a) => cmd_whiten(&a),
    }
}

pub fn cmd_train_gen(a: &TrainGenArgs) -> Result<()> {
    let mut file: TrainGenFile = read_toml(a.config.as_deref())?;
    if let Some(s) = a.steps {
        file.training.steps = s;
    }
    file.training.seed = effective_seed(file.training.seed)?;
    let config = file.generator.clone().unwrap_or_else(GeneratorConfig::desk);
    let (gen, history) = train_generator(config, &file.training, |s| {
        if let Some(q) = s.quality_gap {
            log::info!("step {}: quality gap {q:.4}", s.step);
        }
    })?;
    gen.save(&a.out)?;
    write(&a.out.join("training.csv"), history_csv(&history))?;
    write(&a.out.join("train_config.toml"), toml::to_string(&file).map_err(|e| AtlasError::Config(e.to_string()))?)?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn cmd_train_encoder(a: &TrainEncoderArgs) -> Result<()> {
    let mut file: TrainEncoderFile = read_toml(a.config.as_deref())?;
    if let Some(s) = a.steps {
        file.training.steps = s;
    }
    file.training.seed = effective_seed(file.training.seed)?;
    let gen = GeneratorModel::load(&a.ckpt)?;
    let ec = EncoderConfig::for_generator(gen.config(), file.init_seed);
    let (enc, history) = train_encoder(&gen, ec, &file.training)?;
    enc.save(&a.out)?;
    let mut csv = String::from("step,mse,feature,total\n");
    for h in &history {
        csv.push_str(&format!("{},{:.9e},{:.9e},{:.9e}\n", h.step, h.mse, h.feature, h.total));
    }
    write(&a.out.join("training.csv"), csv)?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn cmd_invert(a: &InvertArgs) -> Result<()> {
    let mut cfg: InversionConfig = read_toml(a.config.as_deref())?;
    cfg.space = a.space.into();
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.lambda_per {
        cfg.lambda_per = v;
    }
    if let Some(v) = a.lambda_reg {
        cfg.lambda_reg = v;
    }
    if let Some(v) = a.lambda_pn {
        cfg.lambda_pn = v;
    }
    if a.split_layer.is_some() {
        cfg.split_layer = a.split_layer;
    }
    cfg.seed = effective_seed(a.seed.unwrap_or(cfg.seed))?;
    cfg.validate()?;
    if cfg.space.is_hybrid() && a.enc.is_none() && !a.no_encoder {
        return Err(AtlasError::Input(format!(
            "space {} needs --enc <encoder checkpoint> (or --no-encoder for a zero-initialized base code)",
            cfg.space
        )));
    }
    let gen = GeneratorModel::load(&a.ckpt)?;
    let enc = match (&a.enc, a.no_encoder) {
        (Some(p), false) => Some(EncoderModel::load(p)?),
        _ => None,
    };
    let whitener = load_or_fit_whitener(a.whitener.as_deref(), &gen, cfg.space, cfg.seed)?;
    let target = Image::load_png(&a.image)?;
    let result = invert(&target, &gen, enc.as_ref(), whitener.as_ref(), &cfg)?;
    save_result(&a.out, &result, &gen, &cfg)?;
    println!(
        "{}: mse {:.6} total {:.6} in {:.1}s",
        a.out.display(),
        result.final_losses.mse,
        result.final_losses.total,
        result.wall_s
    );
    Ok(())
}

fn load_or_fit_whitener(path: Option<&Path>, gen: &GeneratorModel, space: Space, seed: u64) -> Result<Option<PnWhitener>> {
    match path {
        Some(p) => Ok(Some(PnWhitener::load(p)?)),
        None if space.uses_pn_penalty() => Ok(Some(fit_pn_whitener(gen, 100_000, seed)?)),
        None => Ok(None),
    }
}

pub fn cmd_edit(a: &EditArgs) -> Result<()> {
    let (code, n, m) = load_latent(&a.code)?;
    let gen = GeneratorModel::load(&a.ckpt)?;
    if n != gen.config().num_style_layers {
        return Err(AtlasError::Shape {
            expected: format!("code for {} style layers", gen.config().num_style_layers),
            actual: format!("{n}"),
        });
    }
    let gen = if m != gen.config().split_layer { gen.with_split_layer(m)? } else { gen };
    let bank = DirectionBank::load(&a.bank)?;
    let index = match a.direction.parse::<usize>() {
        Ok(i) => i,
        Err(_) => bank
            .directions
            .iter()
            .position(|d| d.name == a.direction)
            .ok_or_else(|| AtlasError::Input(format!("no direction named {:?} in the bank", a.direction)))?,
    };
    let space = if code.z_codes().is_empty() { DirectionSpace::W } else { DirectionSpace::Z };
    let dir = bank.get(index, space)?;
    let edited = crate::editing::apply_edit(&code, dir, a.alpha)?;
    create_dir(&a.out)?;
    save_latent(&a.out.join("edited.lat"), &edited, n, m)?;
    gen.synthesize(&edited)?.save_png(&a.out.join("edited.png"))?;
    let manifest = serde_json::json!({
        "format": "latent-atlas/edit-v1",
        "code": a.code,
        "bank": a.bank,
        "direction": dir.name,
        "alpha": a.alpha,
    });
    write(&a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn cmd_directions(a: &DirectionsArgs) -> Result<()> {
    let gen = GeneratorModel::load(&a.ckpt)?;
    let seed = effective_seed(a.seed)?;
    let d = gen.config().latent_dim;
    let space = match a.space {
        DirSpaceArg::Z => DirectionSpace::Z,
        DirSpaceArg::W => DirectionSpace::W,
    };
    let bank = match a.method {
        MethodArg::Ganspace => ganspace_directions(&gen, a.samples, a.components, seed)?,
        MethodArg::Random => {
            let dirs = (0..a.components as u64)
                .map(|i| random_direction(seed.wrapping_add(i), d, space))
                .collect::<Result<Vec<_>>>()?;
            let mags = dirs.iter().map(|d| d.magnitude).collect();
            DirectionBank::new(
                dirs,
                BankMeta {
                    method: Some(Method::Random),
                    num_samples: 0,
                    seed,
                    stats: mags,
                },
            )?
        }
        MethodArg::Interfacegan => {
            let res = gen.config().output_resolution;
            let probe = AttributeProbe::fit(&ToyDataset::new(res, 0), &a.attribute, 2000, 300)?;
            let mut r = rng::stream(seed, "interfacegan-samples");
            let zs = sample_z_batch(d, a.samples, &mut r);
            let ws = gen.map_batch(&zs);
            let source = if space == DirectionSpace::Z { &zs } else { &ws };
            let mut codes = Vec::with_capacity(a.samples);
            let mut labels = Vec::with_capacity(a.samples);
            for (i, z) in ZCode::unstack(&zs).into_iter().enumerate() {
                let img = gen.synthesize(&crate::spaces::LatentCode::Z(z))?;
                labels.push(probe.predict(&img));
                codes.push(source.data()[i * d..(i + 1) * d].to_vec());
            }
            let (mut dir, acc) = interfacegan_direction(&codes, &labels, space, &SvmConfig { seed, ..Default::default() })?;
            dir.name = a.attribute.clone();
            dir.attribute = Some(a.attribute.clone());
            DirectionBank::new(
                vec![dir],
                BankMeta {
                    method: Some(Method::Interfacegan),
                    num_samples: a.samples,
                    seed,
                    stats: vec![acc, probe.accuracy],
                },
            )?
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    bank.save(&a.out)?;
    println!("{}: {} directions", a.out.display(), bank.len());
    Ok(())
}

/// Targets for one source: generator samples or toy images.
pub fn eval_targets(gen: &GeneratorModel, source: TargetSource, count: usize, spec: &EvalSpec) -> Result<Vec<Target>> {
    match source {
        TargetSource::Generator => (0..count)
            .map(|i| {
                let seed = spec.seed.wrapping_add(7919 * i as u64);
                let code = crate::spaces::sample(Space::ZPlus, gen, seed)?;
                Ok(Target {
                    id: format!("gen{i:03}"),
                    image: gen.synthesize(&code)?,
                })
            })
            .collect(),
        TargetSource::Toy => {
            let ds = ToyDataset::new(gen.config().output_resolution, spec.toy_seed);
            Ok((0..count)
                .map(|i| Target {
                    id: format!("toy{i:03}"),
                    image: ds.image(i as u64).0,
                })
                .collect())
        }
    }
}

pub fn cmd_eval(a: &EvalArgs, jobs: usize) -> Result<()> {
    let mut spec: EvalSpec = read_toml(a.config.as_deref())?;
    spec.seed = effective_seed(spec.seed)?;
    spec.inversion.seed = spec.seed;
    spec.inversion.validate()?;
    let gen = GeneratorModel::load(&a.ckpt)?;
    let enc = a.enc.as_deref().map(EncoderModel::load).transpose()?;
    let all_spaces: Vec<Space> = spec.spaces.iter().chain(&spec.sweep_spaces).copied().collect();
    if all_spaces.iter().any(|s| s.is_hybrid()) && enc.is_none() {
        return Err(AtlasError::Input("hybrid spaces in the eval spec need --enc".into()));
    }
    let whitener = if all_spaces.iter().any(|s| s.uses_pn_penalty()) {
        Some(fit_pn_whitener(&gen, spec.whitener_samples, spec.seed)?)
    } else {
        None
    };
    let models = Models {
        gen: &gen,
        encoder: enc.as_ref(),
        whitener: whitener.as_ref(),
    };
    create_dir(&a.out)?;
    let mut report = EvalReport::default();
    for &source in &spec.sources {
        let targets = eval_targets(&gen, source, spec.num_targets, &spec)?;
        let (rows, _) = reconstruction_benchmark(&targets, &spec.spaces, models, &spec.inversion, jobs);
        report.recon.extend(rows);
    }
    if !spec.sweep_spaces.is_empty() && spec.sweep_targets > 0 {
        let bank = ganspace_directions(&gen, spec.ganspace_samples, spec.sweep_components, spec.seed)?;
        let targets = eval_targets(&gen, TargetSource::Generator, spec.sweep_targets, &spec)?;
        let (_, results) = reconstruction_benchmark(&targets, &spec.sweep_spaces, models, &spec.inversion, jobs);
        let cells: Vec<(usize, Space)> = (0..targets.len())
            .flat_map(|t| spec.sweep_spaces.iter().map(move |&s| (t, s)))
            .collect();
        for ((t, space), res) in cells.into_iter().zip(results) {
            let Some(res) = res else { continue };
            let dirs = if space.is_z_flavored() { &bank.directions } else { &bank.w_directions };
            report
                .sweep
                .extend(editing_sweep(&targets[t].id, space, &res, &gen, dirs, &alpha_grid())?);
        }
    }
    write(&a.out.join("recon.csv"), report.recon_csv(a.timing))?;
    write(&a.out.join("sweep.csv"), report.sweep_csv())?;
    write(&a.out.join("summary.md"), report.markdown())?;
    let manifest = serde_json::json!({
        "format": "latent-atlas/eval-v1",
        "spec": spec,
        "summaries": report.summaries(),
    });
    write(&a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    print!("{}", report.markdown());
    Ok(())
}

pub fn cmd_whiten(a: &WhitenArgs) -> Result<()> {
    let gen = GeneratorModel::load(&a.ckpt)?;
    let w = fit_pn_whitener(&gen, a.samples, effective_seed(a.seed)?)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    w.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}
