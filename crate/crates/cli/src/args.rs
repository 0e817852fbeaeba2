use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdan::network::Ablation;
use hdan::volume_io::VolumeFormat;

/// Hierarchical dense-attention segmentation of isointense infant brain MRI.
#[derive(Parser, Debug)]
#[command(name = "hdan", version, propagate_version = true)]
pub struct Cli {
    /// Cap on worker threads; falls back to HDAN_THREADS, then one per core
    #[arg(long, global = true, env = "HDAN_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    /// Only log warnings and errors
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic T1/T2 phantoms with ground-truth labels and a manifest
    Phantom(PhantomArgs),
    /// Train a network on a manifest of labelled subjects
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint
    Predict(PredictArgs),
    /// Score predicted label maps against ground truth
    Evaluate(EvaluateArgs),
    /// Compare preterm and term tissue volumes from label maps
    Assess(AssessArgs),
    /// Render slices of a scalar volume with the blue-to-red attention colormap
    VizAttention(VizArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// `.meta` header plus `.raw` voxels
    Internal,
    /// Single-file NIfTI-1 (`.nii`)
    Nifti,
    /// Gzipped NIfTI-1 (`.nii.gz`)
    NiftiGz,
    /// Analyze 7.5 header/image pair (`.hdr`/`.img`)
    Analyze,
}

impl From<Format> for VolumeFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Internal => VolumeFormat::Internal,
            Format::Nifti => VolumeFormat::Nifti,
            Format::NiftiGz => VolumeFormat::NiftiGz,
            Format::Analyze => VolumeFormat::Analyze,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Component {
    /// Dense upsampling branches of stages 1-3
    #[value(name = "dense_up")]
    DenseUp,
    /// Channel attention
    Ca,
    /// Spatial attention
    Sa,
}

impl From<Component> for Ablation {
    fn from(c: Component) -> Self {
        match c {
            Component::DenseUp => Ablation::DenseUp,
            Component::Ca => Ablation::Ca,
            Component::Sa => Ablation::Sa,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-width network
    Default,
    /// Narrow network for desk-scale runs
    Tiny,
}

/// One slice of a volume: `axis:index`, with axis `z`, `y`, `x` or `0`-`2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    pub axis: usize,
    pub index: usize,
}

impl std::str::FromStr for SliceSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (axis, index) = s
            .split_once(':')
            .ok_or_else(|| format!("`{s}` is not axis:index"))?;
        let axis = match axis {
            "z" | "0" => 0,
            "y" | "1" => 1,
            "x" | "2" => 2,
            other => return Err(format!("unknown axis `{other}` (use z, y, x or 0-2)")),
        };
        let index = index
            .parse()
            .map_err(|_| format!("slice index `{index}` is not a number"))?;
        Ok(Self { axis, index })
    }
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    /// Stored-value to class table for NIfTI/Analyze labels, e.g. "0:BG 10:CSF 150:GM 250:WM"
    #[arg(long, value_name = "TABLE")]
    pub label_map: Option<String>,

    /// Read label values missing from the table as background instead of failing
    #[arg(long)]
    pub lenient_labels: bool,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Number of subjects
    #[arg(long, default_value_t = 1)]
    pub count: usize,

    /// Edge length in voxels; must be a multiple of 16
    #[arg(long, default_value_t = 64)]
    pub size: usize,

    /// WM/GM mean separation as a fraction of the dynamic range
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,

    /// Gaussian noise standard deviation
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,

    /// Seed of the first subject; subject i uses seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// File format of the written volumes
    #[arg(long, value_enum, default_value_t = Format::Internal)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment TOML with [network], [training] and [data] tables
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Training manifest CSV (subject_id,images,labels); overrides [data].manifest
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,

    /// Directory for the checkpoint and the epoch log
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Components to switch off (all three give the backbone baseline)
    #[arg(long, value_enum, num_args = 1.., value_name = "COMPONENT")]
    pub ablate: Vec<Component>,

    /// Network width preset, replacing the [network] table
    #[arg(long, value_enum)]
    pub network: Option<Preset>,

    /// Number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,

    /// Seed for weight initialization and patch sampling
    #[arg(long)]
    pub seed: Option<u64>,

    /// Cubic training patch edge
    #[arg(long)]
    pub patch: Option<usize>,

    /// Stride between candidate patch origins
    #[arg(long)]
    pub stride: Option<usize>,

    /// Patches drawn per subject per epoch
    #[arg(long)]
    pub patches_per_volume: Option<usize>,

    /// Continue from the checkpoint already in --out
    #[arg(long)]
    pub resume: bool,

    #[command(flatten)]
    pub labels: LabelArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Network or training checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    /// T1 and T2 files separated by a comma, or one two-frame file
    #[arg(
        long = "in",
        value_name = "VOL[,VOL2]",
        value_delimiter = ',',
        required = true
    )]
    pub inputs: Vec<PathBuf>,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Experiment TOML whose [network] table must match the checkpoint
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Also export the spatial attention volume and colored slices
    #[arg(long)]
    pub attention: bool,

    /// Attention site to export: 0 for the extractor, 1-4 for the stages
    #[arg(long, default_value_t = 1)]
    pub attention_stage: usize,

    /// Slices to render as axis:index (repeatable); default every z slice
    #[arg(long, value_name = "AXIS:INDEX", requires = "attention")]
    pub slice: Vec<SliceSpec>,

    /// Cubic inference patch edge; defaults to the training patch
    #[arg(long)]
    pub patch: Option<usize>,

    /// Stride between patches; defaults to the training stride
    #[arg(long)]
    pub stride: Option<usize>,

    /// File format of the written volumes
    #[arg(long, value_enum, default_value_t = Format::Internal)]
    pub format: Format,

    /// Stored-value table for the written labels; defaults to 0/10/150/250 for four classes
    #[arg(long, value_name = "TABLE")]
    pub label_map: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of predicted label maps
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,

    /// Directory of ground-truth label maps, matched to predictions by file stem
    #[arg(long, value_name = "DIR")]
    pub truth: PathBuf,

    /// Per-subject, per-class report CSV
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Also write the per-class means as CSV
    #[arg(long, value_name = "FILE")]
    pub summary: Option<PathBuf>,

    #[command(flatten)]
    pub labels: LabelArgs,
}

#[derive(Args, Debug)]
pub struct AssessArgs {
    /// Cohort CSV (subject_id,group,path) with group preterm or term
    #[arg(long, value_name = "COHORT")]
    pub manifest: PathBuf,

    /// Directory the manifest's label paths are relative to
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,

    /// Rendered comparison table
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Per-subject volumes CSV; defaults to --out with a .csv extension
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,

    #[command(flatten)]
    pub labels: LabelArgs,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    /// Scalar volume to render, e.g. an exported attention map
    #[arg(long, value_name = "FILE")]
    pub volume: PathBuf,

    /// Directory for the PNG slices
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Slices to render as axis:index (repeatable); default every z slice
    #[arg(long, value_name = "AXIS:INDEX")]
    pub slice: Vec<SliceSpec>,

    /// Frame of a multi-frame volume
    #[arg(long, default_value_t = 0)]
    pub frame: usize,

    /// Value drawn in full blue
    #[arg(long, default_value_t = 0.0)]
    pub low: f64,

    /// Value drawn in full red
    #[arg(long, default_value_t = 1.0)]
    pub high: f64,
}
