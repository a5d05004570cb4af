//! Run configuration, method presets and the plain-text config format.
//!
//! The format is line based: `[section]` headers, `key = value` pairs and
//! `#` comments. `preset` in `[run]` is applied first; every other key then
//! overrides one field of the expanded preset. `docs/config-format.md`
//! lists every key.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::augment::{Pipeline, PatchifyConfig};
use crate::encoder::{EncoderConfig, Norm};
use crate::extraction::{parse_comparison_spec, AnchorMode, ComparisonSpec};
use crate::nn::AdamConfig;
use crate::simloss::{LossConfig, LossKind};

use super::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Amdim,
    Cpc,
    Simclr,
    Yadim,
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Amdim, Preset::Cpc, Preset::Simclr, Preset::Yadim];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Amdim => "amdim",
            Preset::Cpc => "cpc",
            Preset::Simclr => "simclr",
            Preset::Yadim => "yadim",
            Preset::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "amdim" => Some(Preset::Amdim),
            "cpc" => Some(Preset::Cpc),
            "simclr" => Some(Preset::Simclr),
            "yadim" => Some(Preset::Yadim),
            "custom" => Some(Preset::Custom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    Dot,
    Bilinear,
    Cosine,
}

impl SimilarityKind {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Dot => "dot",
            SimilarityKind::Bilinear => "bilinear",
            SimilarityKind::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractionConfig {
    /// Feature-map pairs compared across two views.
    Multiscale { spec: ComparisonSpec, anchors: AnchorMode },
    /// Downward prediction on the patch grid of a single view.
    Cpc { max_offset: usize, embed_scale: f64 },
    /// Flattened deepest map through a projection head.
    Simclr { head_hidden: usize, normalize: bool },
}

impl ExtractionConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ExtractionConfig::Multiscale { .. } => "multiscale",
            ExtractionConfig::Cpc { .. } => "cpc",
            ExtractionConfig::Simclr { .. } => "simclr",
        }
    }

    fn default_for(kind: &str) -> Option<Self> {
        Some(match kind {
            "multiscale" => ExtractionConfig::Multiscale { spec: ComparisonSpec::last_only(), anchors: AnchorMode::AllCells },
            "cpc" => ExtractionConfig::Cpc { max_offset: 3, embed_scale: 0.1 },
            "simclr" => ExtractionConfig::Simclr { head_hidden: 128, normalize: true },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub nuisance: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n: 2000, classes: 2, channels: 3, size: 32, nuisance: 0.7, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { hidden: 1024, epochs: 50, lr: 1e-3, batch_size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub run_id: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shards: usize,
    pub precision: Precision,
    pub record_wall_time: bool,
    pub data: DataConfig,
    pub pipeline: Pipeline,
    pub encoder: EncoderConfig,
    pub extraction: ExtractionConfig,
    pub similarity: SimilarityKind,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub probe: ProbeConfig,
}

/// Encoder for whole 32x32 images: four unpadded stages whose last three
/// maps are 7x7, 3x3 and 1x1, projected to one width for cross-layer
/// comparison.
fn image_encoder(norm: Norm) -> EncoderConfig {
    EncoderConfig {
        input_channels: 3,
        stage_channels: vec![16, 32, 64, 128],
        blocks_per_stage: vec![1, 1, 1, 1],
        stage_strides: vec![2, 2, 2, 1],
        kernel_size: 3,
        use_padding: false,
        norm,
        embed_dim: Some(64),
    }
}

/// Encoder for 8x8 patches: 8 -> 6 -> 4 -> 1.
fn patch_encoder(norm: Norm) -> EncoderConfig {
    EncoderConfig {
        input_channels: 3,
        stage_channels: vec![16, 32, 64],
        blocks_per_stage: vec![1, 1, 1],
        stage_strides: vec![1, 1, 2],
        kernel_size: 3,
        use_padding: false,
        norm,
        embed_dim: None,
    }
}

fn patches() -> PatchifyConfig {
    PatchifyConfig { q: 8, overlap: 0 }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> RunConfig {
        let base = RunConfig {
            preset,
            run_id: preset.name().to_string(),
            seed: 0,
            epochs: 10,
            batch_size: 32,
            shards: 1,
            precision: Precision::F32,
            record_wall_time: false,
            data: DataConfig::default(),
            pipeline: Pipeline::amdim(),
            encoder: image_encoder(Norm::None),
            extraction: ExtractionConfig::Multiscale { spec: ComparisonSpec::amdim(), anchors: AnchorMode::AllCells },
            similarity: SimilarityKind::Dot,
            loss: LossConfig::nce_amdim(),
            optimizer: AdamConfig::default(),
            probe: ProbeConfig::default(),
        };
        match preset {
            Preset::Amdim | Preset::Custom => base,
            Preset::Cpc => RunConfig {
                pipeline: Pipeline::cpc(patches()),
                encoder: patch_encoder(Norm::Layer),
                extraction: ExtractionConfig::Cpc { max_offset: 3, embed_scale: 0.1 },
                loss: LossConfig::info_nce(),
                ..base
            },
            Preset::Simclr => RunConfig {
                pipeline: Pipeline::simclr(),
                encoder: EncoderConfig { embed_dim: None, ..image_encoder(Norm::Batch) },
                extraction: ExtractionConfig::Simclr { head_hidden: 128, normalize: true },
                similarity: SimilarityKind::Cosine,
                loss: LossConfig::nt_xent(0.5),
                ..base
            },
            Preset::Yadim => RunConfig {
                pipeline: Pipeline::yadim(patches()),
                encoder: patch_encoder(Norm::None),
                extraction: ExtractionConfig::Multiscale { spec: ComparisonSpec::last_only(), anchors: AnchorMode::AllCells },
                epochs: 20,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(HarnessError::Config { line: 0, msg: format!("{key}: {msg}") });
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return bad("run.batch_size", "must be at least 2 (negatives come from other images)");
        }
        if self.shards == 0 {
            return bad("run.shards", "must be positive");
        }
        if self.epochs == 0 {
            return bad("run.epochs", "must be positive");
        }
        if self.encoder.input_channels != self.data.channels {
            return bad("encoder.input_channels", "must equal data.channels");
        }
        if self.probe.hidden == 0 {
            return bad("probe.hidden", "must be at least 1");
        }
        match &self.extraction {
            ExtractionConfig::Cpc { max_offset, .. } if *max_offset == 0 => bad("extraction.max_offset", "must be positive"),
            ExtractionConfig::Cpc { .. } if self.pipeline.patchify().is_none() => {
                bad("extraction.kind", "cpc extraction needs a pipeline ending in patchify")
            }
            ExtractionConfig::Simclr { head_hidden, .. } if *head_hidden == 0 => bad("extraction.head_hidden", "must be positive"),
            _ => Ok(()),
        }
    }

    /// Fully explicit config text; parsing it yields this config.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[run]");
        let _ = writeln!(w, "preset = {}", self.preset.name());
        let _ = writeln!(w, "run_id = {}", self.run_id);
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "epochs = {}", self.epochs);
        let _ = writeln!(w, "batch_size = {}", self.batch_size);
        let _ = writeln!(w, "shards = {}", self.shards);
        let _ = writeln!(w, "precision = {}", if self.precision == Precision::F32 { "f32" } else { "f64" });
        let _ = writeln!(w, "record_wall_time = {}", self.record_wall_time);
        let d = &self.data;
        let _ = writeln!(w, "\n[data]\nn = {}\nclasses = {}\nchannels = {}\nsize = {}\nnuisance = {}\nseed = {}", d.n, d.classes, d.channels, d.size, d.nuisance, d.seed);
        let _ = writeln!(w, "\n[augment]\npipeline = {}", self.pipeline);
        let e = &self.encoder;
        let _ = writeln!(w, "\n[encoder]");
        let _ = writeln!(w, "input_channels = {}", e.input_channels);
        let _ = writeln!(w, "stage_channels = {}", list(&e.stage_channels));
        let _ = writeln!(w, "blocks_per_stage = {}", list(&e.blocks_per_stage));
        let _ = writeln!(w, "stage_strides = {}", list(&e.stage_strides));
        let _ = writeln!(w, "kernel_size = {}", e.kernel_size);
        let _ = writeln!(w, "use_padding = {}", e.use_padding);
        let _ = writeln!(w, "norm = {}", e.norm);
        let _ = writeln!(w, "embed_dim = {}", e.embed_dim.map_or("none".to_string(), |v| v.to_string()));
        let _ = writeln!(w, "\n[extraction]\nkind = {}", self.extraction.kind());
        match &self.extraction {
            ExtractionConfig::Multiscale { spec, anchors } => {
                let _ = writeln!(w, "spec = {spec}");
                let _ = match anchors {
                    AnchorMode::AllCells => writeln!(w, "anchors = all"),
                    AnchorMode::Sampled(s) => writeln!(w, "anchors = sampled({s})"),
                };
            }
            ExtractionConfig::Cpc { max_offset, embed_scale } => {
                let _ = writeln!(w, "max_offset = {max_offset}\nembed_scale = {embed_scale}");
            }
            ExtractionConfig::Simclr { head_hidden, normalize } => {
                let _ = writeln!(w, "head_hidden = {head_hidden}\nnormalize = {normalize}");
            }
        }
        let _ = writeln!(w, "\n[similarity]\nkind = {}", self.similarity.name());
        let l = &self.loss;
        let _ = writeln!(
            w,
            "\n[loss]\nkind = {}\ntemperature = {}\ninclude_positive_in_denominator = {}",
            l.kind.name(),
            l.temperature,
            l.include_positive_in_denominator
        );
        let o = &self.optimizer;
        let _ = writeln!(w, "\n[optimizer]\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {:e}", o.lr, o.beta1, o.beta2, o.eps);
        let p = &self.probe;
        let _ = writeln!(w, "\n[probe]\nhidden = {}\nepochs = {}\nlr = {}\nbatch_size = {}\nseed = {}", p.hidden, p.epochs, p.lr, p.batch_size, p.seed);
        s
    }
}

/// Parses a config file. Keys are applied on top of the preset named in
/// `[run] preset` (default `custom`, which starts from the AMDIM choices).
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_over(text, Preset::Custom)
}

/// Like [`parse_config`], starting from `fallback` when the text names no
/// preset.
pub fn parse_config_over(text: &str, fallback: Preset) -> Result<RunConfig> {
    let mut entries: BTreeMap<(String, String), (usize, String)> = BTreeMap::new();
    let mut order = Vec::new();
    let mut section = String::from("run");
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| HarnessError::Config { line: line_no, msg: "unterminated section header".into() })?;
            section = name.trim().to_string();
            if !SECTIONS.contains(&section.as_str()) {
                return Err(HarnessError::Config { line: line_no, msg: format!("unknown section [{section}]") });
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config { line: line_no, msg: format!("expected key = value, got '{line}'") })?;
        let key = (section.clone(), k.trim().to_string());
        if entries.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
            return Err(HarnessError::Config { line: line_no, msg: format!("duplicate key {}.{}", key.0, key.1) });
        }
        order.push(key);
    }
    let take = |sec: &str, key: &str| entries.get(&(sec.to_string(), key.to_string())).cloned();
    let preset = match take("run", "preset") {
        Some((line, v)) => Preset::parse(&v).ok_or_else(|| HarnessError::Config { line, msg: format!("unknown preset '{v}'") })?,
        None => fallback,
    };
    let mut cfg = RunConfig::preset(preset);
    if let Some((line, kind)) = take("extraction", "kind") {
        if kind != cfg.extraction.kind() {
            cfg.extraction = ExtractionConfig::default_for(&kind)
                .ok_or_else(|| HarnessError::Config { line, msg: format!("unknown extraction kind '{kind}'") })?;
        }
    }
    if let Some((line, kind)) = take("loss", "kind") {
        let k = LossKind::parse(&kind).ok_or_else(|| HarnessError::Config { line, msg: format!("unknown loss kind '{kind}'") })?;
        if k != cfg.loss.kind {
            cfg.loss = LossConfig::for_kind(k);
        }
    }
    for key in &order {
        let (line, value) = &entries[key];
        apply_key(&mut cfg, &key.0, &key.1, value).map_err(|msg| HarnessError::Config { line: *line, msg })?;
    }
    Ok(cfg)
}

const SECTIONS: [&str; 9] = ["run", "data", "augment", "encoder", "extraction", "similarity", "loss", "optimizer", "probe"];

fn apply_key(cfg: &mut RunConfig, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
    fn num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
        v.parse().map_err(|_| format!("invalid number '{v}'"))
    }
    fn boolean(v: &str) -> std::result::Result<bool, String> {
        match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected true or false, got '{v}'")),
        }
    }
    fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
        v.split(',').map(|s| num(s.trim())).collect()
    }
    let unknown = || Err(format!("unknown key {section}.{key}"));
    match (section, key) {
        ("run", "preset") => {}
        ("run", "run_id") => cfg.run_id = v.to_string(),
        ("run", "seed") => cfg.seed = num(v)?,
        ("run", "epochs") => cfg.epochs = num(v)?,
        ("run", "batch_size") => cfg.batch_size = num(v)?,
        ("run", "shards") => cfg.shards = num(v)?,
        ("run", "precision") => {
            cfg.precision = match v {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return Err(format!("precision must be f32 or f64, got '{v}'")),
            }
        }
        ("run", "record_wall_time") => cfg.record_wall_time = boolean(v)?,
        ("data", "n") => cfg.data.n = num(v)?,
        ("data", "classes") => cfg.data.classes = num(v)?,
        ("data", "channels") => cfg.data.channels = num(v)?,
        ("data", "size") => cfg.data.size = num(v)?,
        ("data", "nuisance") => cfg.data.nuisance = num(v)?,
        ("data", "seed") => cfg.data.seed = num(v)?,
        ("augment", "pipeline") => cfg.pipeline = Pipeline::parse(v).map_err(|e| e.to_string())?,
        ("encoder", "input_channels") => cfg.encoder.input_channels = num(v)?,
        ("encoder", "stage_channels") => cfg.encoder.stage_channels = list(v)?,
        ("encoder", "blocks_per_stage") => cfg.encoder.blocks_per_stage = list(v)?,
        ("encoder", "stage_strides") => cfg.encoder.stage_strides = list(v)?,
        ("encoder", "kernel_size") => cfg.encoder.kernel_size = num(v)?,
        ("encoder", "use_padding") => cfg.encoder.use_padding = boolean(v)?,
        ("encoder", "norm") => cfg.encoder.norm = Norm::parse(v).ok_or(format!("unknown norm '{v}'"))?,
        ("encoder", "embed_dim") => cfg.encoder.embed_dim = if v == "none" { None } else { Some(num(v)?) },
        ("encoder", "width") => {
            let f: f64 = num(v)?;
            cfg.encoder = cfg.encoder.clone().with_width(f);
        }
        ("extraction", "kind") => {}
        ("extraction", k) => match (&mut cfg.extraction, k) {
            (ExtractionConfig::Multiscale { spec, .. }, "spec") => *spec = parse_comparison_spec(v).map_err(|e| e.to_string())?,
            (ExtractionConfig::Multiscale { anchors, .. }, "anchors") => {
                *anchors = if v == "all" {
                    AnchorMode::AllCells
                } else if let Some(s) = v.strip_prefix("sampled(").and_then(|r| r.strip_suffix(')')) {
                    AnchorMode::Sampled(num(s.trim())?)
                } else {
                    return Err(format!("anchors must be 'all' or 'sampled(seed)', got '{v}'"));
                }
            }
            (ExtractionConfig::Cpc { max_offset, .. }, "max_offset") => *max_offset = num(v)?,
            (ExtractionConfig::Cpc { embed_scale, .. }, "embed_scale") => *embed_scale = num(v)?,
            (ExtractionConfig::Simclr { head_hidden, .. }, "head_hidden") => *head_hidden = num(v)?,
            (ExtractionConfig::Simclr { normalize, .. }, "normalize") => *normalize = boolean(v)?,
            _ => return Err(format!("key extraction.{k} does not apply to extraction kind '{}'", cfg.extraction.kind())),
        },
        ("similarity", "kind") => {
            cfg.similarity = match v {
                "dot" => SimilarityKind::Dot,
                "bilinear" => SimilarityKind::Bilinear,
                "cosine" => SimilarityKind::Cosine,
                _ => return Err(format!("unknown similarity '{v}'")),
            }
        }
        ("loss", "kind") => {}
        ("loss", "temperature") => cfg.loss.temperature = num(v)?,
        ("loss", "include_positive_in_denominator") => cfg.loss.include_positive_in_denominator = boolean(v)?,
        ("optimizer", "lr") => cfg.optimizer.lr = num(v)?,
        ("optimizer", "beta1") => cfg.optimizer.beta1 = num(v)?,
        ("optimizer", "beta2") => cfg.optimizer.beta2 = num(v)?,
        ("optimizer", "eps") => cfg.optimizer.eps = num(v)?,
        ("probe", "hidden") => cfg.probe.hidden = num(v)?,
        ("probe", "epochs") => cfg.probe.epochs = num(v)?,
        ("probe", "lr") => cfg.probe.lr = num(v)?,
        ("probe", "batch_size") => cfg.probe.batch_size = num(v)?,
        ("probe", "seed") => cfg.probe.seed = num(v)?,
        _ => return unknown(),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips_every_preset() {
        for p in Preset::ALL {
            let cfg = RunConfig::preset(p);
            cfg.validate().unwrap();
            let back = parse_config(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg, "{}", p.name());
        }
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = parse_config("[run]\npreset = yadim\nepochs = 3\n[extraction]\nspec = same_level\n[encoder]\nnorm = layer\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.encoder.norm, Norm::Layer);
        assert_eq!(cfg.extraction, ExtractionConfig::Multiscale { spec: ComparisonSpec::same_level(), anchors: AnchorMode::AllCells });
        assert_eq!(cfg.pipeline, RunConfig::preset(Preset::Yadim).pipeline);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_config("[run]\nepochs = 3\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_config("[nowhere]\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_config("[extraction]\nkind = cpc\nspec = amdim\n").unwrap_err();
        assert!(err.to_string().contains("does not apply"), "{err}");
    }

    #[test]
    fn changing_extraction_kind_resets_its_defaults() {
        let cfg = parse_config("[run]\npreset = amdim\n[extraction]\nkind = simclr\nhead_hidden = 7\n").unwrap();
        assert_eq!(cfg.extraction, ExtractionConfig::Simclr { head_hidden: 7, normalize: true });
    }
}
