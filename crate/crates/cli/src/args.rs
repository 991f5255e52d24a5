use std::path::PathBuf;
use std::str::FromStr;

use alan_core::knn::KnnConfig;
use alan_core::segment::{PostProcess, Thresholds};
use alan_core::TrainConfig;
use clap::{Args, Parser, Subcommand};

use crate::config::SegmentSection;

#[derive(Debug, Parser)]
#[command(name = "alan", version, about = "Parcelize echo patch features, turn parcels into segments and classify views")]
pub struct Cli {
    /// TOML file with optional [train], [segment] and [knn] sections.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. One thread gives bit-identical outputs across runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "alan-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a parcelization head; writes head.alanhead, standardization.toml and train_report.toml.
    #[command(after_help = train_help())]
    TrainHead(TrainArgs),
    /// Write one parcel map per selected frame under parcels/<seq_id>/<frame>.alanpmap.
    Parcelize(ParcelizeArgs),
    /// Learn the interior parcel IDs of a region; writes segmenter.toml.
    #[command(after_help = segment_help())]
    FitSegments(FitArgs),
    /// Turn parcel maps into masks under masks/<seq_id>/<frame>.alanmask.
    Segment(SegmentArgs),
    /// Score predicted masks against the manifest annotations; writes dice_report.toml and dice_histogram.csv.
    EvalDice(EvalArgs),
    /// Build a view index from labelled global descriptors; writes views.alanknn.
    IndexViews(IndexArgs),
    /// Classify the frames of every sequence; writes view_predictions.toml.
    #[command(after_help = knn_help())]
    ClassifyViews(ClassifyArgs),
    /// Render a prediction/annotation overlay as a binary PPM.
    RenderOverlay(OverlayArgs),
    /// Generate a synthetic train/test dataset with train.toml and test.toml manifests.
    MakeSynthetic(SynthArgs),
}

fn section_help(section: &str, body: String) -> String {
    let indented: String = body.lines().map(|l| format!("  {l}\n")).collect();
    format!("Config keys in [{section}] with their defaults:\n{indented}")
}

fn train_help() -> String {
    section_help("train", TrainConfig::default().to_toml())
}

fn segment_help() -> String {
    let defaults = SegmentSection {
        region_label: None,
        thresholds: Thresholds::default(),
        postproc: PostProcess::default(),
    };
    section_help("segment", toml::to_string(&defaults).expect("defaults serialize"))
}

fn knn_help() -> String {
    section_help("knn", toml::to_string(&KnnConfig::default()).expect("defaults serialize"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Adam learning rate [default: 0.005].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs [default: 40].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of parcels K [default: 64].
    #[arg(long, short = 'k')]
    pub classes: Option<usize>,
    /// Frames per sampled clip [default: 16].
    #[arg(long)]
    pub frames_per_clip: Option<usize>,
    /// Spacing between clip frames [default: 2].
    #[arg(long)]
    pub frame_stride: Option<usize>,
    /// Sequences per optimizer step [default: 2].
    #[arg(long)]
    pub batch_sequences: Option<usize>,
    /// Skip per-channel feature standardization.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSelector {
    /// Frames that carry an annotation; every frame when a sequence has none.
    Annotated,
    All,
    List(Vec<usize>),
}

impl FromStr for FrameSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "annotated" => Ok(FrameSelector::Annotated),
            "all" => Ok(FrameSelector::All),
            list => list
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad frame index {t:?}: {e}")))
                .collect::<Result<Vec<_>, _>>()
                .map(FrameSelector::List),
        }
    }
}

#[derive(Debug, Args)]
pub struct ParcelizeArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Trained head checkpoint.
    #[arg(long, value_name = "FILE")]
    pub head: PathBuf,
    /// Standardization statistics [default: standardization.toml next to the head].
    #[arg(long, value_name = "FILE")]
    pub standardization: Option<PathBuf>,
    /// `annotated`, `all` or a comma-separated frame list.
    #[arg(long, default_value = "annotated")]
    pub frames: FrameSelector,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Manifest whose masks define the target region.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Directory written by `parcelize`.
    #[arg(long, value_name = "DIR")]
    pub parcels: PathBuf,
    /// Region label to fit [default: the only label in the manifest].
    #[arg(long)]
    pub region: Option<String>,
    /// Fraction of a parcel inside the mask for a hit [default: 0.75].
    #[arg(long)]
    pub overlap_frac: Option<f64>,
    /// Hits per present frame [default: 0.5].
    #[arg(long)]
    pub hit_rate: Option<f64>,
    /// Frames in which a parcel must appear [default: 0.3].
    #[arg(long)]
    pub presence_rate: Option<f64>,
    /// Enclave cutoff [default: 8].
    #[arg(long)]
    pub enclave_cutoff: Option<usize>,
    /// Closing radius in pixels [default: 10].
    #[arg(long)]
    pub closing_radius: Option<usize>,
    /// Snake iterations [default: 10].
    #[arg(long)]
    pub snake_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Manifest naming the sequences (and their grayscale frames).
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub parcels: PathBuf,
    /// File written by `fit-segments`.
    #[arg(long, value_name = "FILE")]
    pub segmenter: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest with annotated masks.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Directory written by `segment`.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Only score this region label.
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long, default_value_t = alan_core::metrics::DEFAULT_BIN_WIDTH)]
    pub bin_width: f64,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Manifest whose entries carry view labels and global descriptors.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Use every n-th frame.
    #[arg(long, default_value_t = 1)]
    pub frame_step: usize,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// File written by `index-views`.
    #[arg(long, value_name = "FILE")]
    pub index: PathBuf,
    /// Neighbours [default: 2].
    #[arg(long, short = 'k')]
    pub k: Option<usize>,
    /// Softmax temperature of the votes [default: 0.07].
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub frame_step: usize,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    /// Predicted mask.
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Annotated mask.
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
    /// Grayscale PGM background.
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
    /// Parcel map whose borders are drawn on top.
    #[arg(long, value_name = "FILE")]
    pub parcels: Option<PathBuf>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "overlay.ppm")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub train: usize,
    #[arg(long, default_value_t = 4)]
    pub test: usize,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    /// Patch grid side.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Also write grayscale frames for the annotated frames.
    #[arg(long)]
    pub images: bool,
}
