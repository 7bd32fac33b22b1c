//! Synthetic temporal-ordering questions over planted events.
//!
//! Each video is Gaussian background noise with a few events planted in
//! disjoint temporal slots. An event adds one archetype's signature vector
//! to a small spatial patch for a few consecutive frames. Signatures are
//! orthogonal, so any two have cosine 0. Questions ask which event came
//! first or last, or name one event and ask which came right before or
//! right after it; the answer is always an archetype.
//!
//! Item `i` of a split is generated from its own random stream derived from
//! `(seed, split, i)`, so any item can be regenerated from metadata alone.
//! Labels cycle through the classes, which keeps the answer histogram
//! balanced to within one item per class.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dependency::DependencyParse;
use crate::error::{Error, Result};
use crate::model::config::config_hash;
use crate::model::{Example, QuestionRecord};
use crate::sampler::FeatureVolume;

pub const DATASET_VERSION: u32 = 1;

/// Event names; each splits into two subwords.
pub const EVENT_WORDS: [&str; 8] = [
    "running", "jumping", "sitting", "eating", "reading", "walking", "drinking", "cooking",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of event kinds; also the answer vocabulary size.
    pub num_archetypes: usize,
    pub events_per_video: usize,
    /// Frames each event lasts; the video is cut into slots of this length.
    pub event_frames: usize,
    /// Side of the square spatial patch an event covers.
    pub patch: usize,
    /// Added signature norm per cell is `amplitude · √channels`.
    pub amplitude: f64,
    pub noise: f64,
    /// Question kinds drawn uniformly per item.
    pub templates: Vec<Template>,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            height: 5,
            width: 5,
            channels: 32,
            num_archetypes: 6,
            events_per_video: 3,
            event_frames: 4,
            patch: 3,
            amplitude: 1.0,
            noise: 0.5,
            templates: vec![Template::First, Template::Last],
            train_size: 500,
            test_size: 200,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn slots(&self) -> usize {
        self.frames / self.event_frames.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("video extents must be >= 1".into()));
        }
        if self.num_archetypes < 2 || self.num_archetypes > EVENT_WORDS.len() {
            return Err(Error::Config(format!(
                "need 2..={} event archetypes, got {}",
                EVENT_WORDS.len(),
                self.num_archetypes
            )));
        }
        if self.num_archetypes > self.channels {
            return Err(Error::Config(format!(
                "{} orthogonal signatures do not fit in {} channels",
                self.num_archetypes, self.channels
            )));
        }
        if self.events_per_video < 2 || self.events_per_video > self.num_archetypes {
            return Err(Error::Config(format!(
                "events per video must be in 2..={}, got {}",
                self.num_archetypes, self.events_per_video
            )));
        }
        if self.event_frames == 0 || self.events_per_video > self.slots() {
            return Err(Error::Config(format!(
                "{} events of {} frames do not fit in {} disjoint slots of a {}-frame video",
                self.events_per_video,
                self.event_frames,
                self.slots(),
                self.frames
            )));
        }
        if self.patch == 0 || self.patch > self.height || self.patch > self.width {
            return Err(Error::Config(format!(
                "event patch {} does not fit a {}×{} frame",
                self.patch, self.height, self.width
            )));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("at least one question template is required".into()));
        }
        if !(self.noise >= 0.0) || !(self.amplitude > 0.0) {
            return Err(Error::Config("noise must be >= 0 and amplitude > 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        config_hash(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// "what happened first"
    First,
    /// "what did they do last"
    Last,
    /// "what happened before the E"
    Before,
    /// "what did they do after E"
    After,
}

pub const ALL_TEMPLATES: [Template; 4] = [Template::First, Template::Last, Template::Before, Template::After];

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "first" => Ok(Template::First),
            "last" => Ok(Template::Last),
            "before" => Ok(Template::Before),
            "after" => Ok(Template::After),
            other => Err(Error::Config(format!(
                "unknown question template `{other}` (expected first, last, before or after)"
            ))),
        }
    }
}

impl std::fmt::Display for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Template::First => "first",
            Template::Last => "last",
            Template::Before => "before",
            Template::After => "after",
        })
    }
}

impl Template {
    /// Whether the question names an event.
    pub fn has_subject(self) -> bool {
        matches!(self, Template::Before | Template::After)
    }

    /// Words and word-level governors of the question; `event` is ignored
    /// by templates without a subject.
    pub fn words(self, event: &str) -> (Vec<String>, Vec<Option<usize>>) {
        let (words, govs): (Vec<&str>, Vec<Option<usize>>) = match self {
            Template::First => (vec!["what", "happened", "first"], vec![Some(1), None, Some(1)]),
            Template::Last => (
                vec!["what", "did", "they", "do", "last"],
                vec![Some(3), Some(3), Some(3), None, Some(3)],
            ),
            Template::Before => (
                vec!["what", "happened", "before", "the", event],
                vec![Some(1), None, Some(4), Some(4), Some(1)],
            ),
            Template::After => (
                vec!["what", "did", "they", "do", "after", event],
                vec![Some(3), Some(3), Some(3), None, Some(5), Some(3)],
            ),
        };
        (words.into_iter().map(str::to_string).collect(), govs)
    }

    pub fn parse(self, event: &str) -> Result<DependencyParse> {
        let (words, govs) = self.words(event);
        let counts: Vec<usize> = words
            .iter()
            .map(|w| if EVENT_WORDS.contains(&w.as_str()) { 2 } else { 1 })
            .collect();
        DependencyParse::new(words, govs, &counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub archetype: usize,
    pub start_frame: usize,
    pub frames: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Everything needed to rebuild one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub split: Split,
    pub index: usize,
    /// Sorted by start frame.
    pub events: Vec<PlantedEvent>,
    pub template: Template,
    /// Archetype the question refers to, if any.
    pub subject: Option<usize>,
    pub label: usize,
}

/// The answer implied by planted events: the earliest or latest archetype,
/// or the one right before or right after the subject in time.
pub fn answer_from_events(template: Template, subject: Option<usize>, events: &[PlantedEvent]) -> Option<usize> {
    let mut order: Vec<&PlantedEvent> = events.iter().collect();
    order.sort_by_key(|e| e.start_frame);
    let pos = |s: Option<usize>| order.iter().position(|e| Some(e.archetype) == s);
    match template {
        Template::First => order.first().map(|e| e.archetype),
        Template::Last => order.last().map(|e| e.archetype),
        Template::Before => pos(subject)?.checked_sub(1).map(|p| order[p].archetype),
        Template::After => order.get(pos(subject)? + 1).map(|e| e.archetype),
    }
}

/// Question text for `meta`'s template and subject.
pub fn question_parse(template: Template, subject: Option<usize>) -> Result<DependencyParse> {
    match (template.has_subject(), subject) {
        (true, Some(s)) => template.parse(EVENT_WORDS[s]),
        (false, None) => template.parse(""),
        _ => Err(Error::InvalidInput(format!(
            "template `{template}` and subject {subject:?} disagree"
        ))),
    }
}

/// Subword vocabulary shared by all questions of the task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn for_task(num_archetypes: usize) -> Result<Self> {
        let mut pieces = std::collections::BTreeSet::new();
        for t in ALL_TEMPLATES {
            for ev in &EVENT_WORDS[..num_archetypes] {
                for p in t.parse(ev)?.subwords() {
                    pieces.insert(p.to_string());
                }
            }
        }
        Ok(Self {
            ids: pieces.into_iter().enumerate().map(|(i, p)| (p, i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, piece: &str) -> Result<usize> {
        self.ids
            .get(piece)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("`{piece}` is not in the vocabulary")))
    }

    pub fn encode(&self, parse: DependencyParse) -> Result<QuestionRecord> {
        let ids = parse.subwords().map(|p| self.id(p)).collect::<Result<_>>()?;
        QuestionRecord::new(ids, parse)
    }
}

/// `n` orthogonal directions of norm `√d` (Gram–Schmidt on Gaussian draws).
pub fn signatures(n: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n > d {
        return Err(Error::Config(format!(
            "{n} orthogonal signatures do not fit in {d} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for (a, b) in v.iter_mut().zip(u) {
                *a -= dot * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            let s = (d as f64).sqrt() / norm;
            out.push(v.into_iter().map(|a| a * s).collect());
        }
    }
    Ok(out)
}

fn item_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 62,
    };
    rng.set_stream(base + index as u64);
    rng
}

/// Event layout and question for one item; consumes the item stream in a
/// fixed order so that [`render_volume`] can continue from it.
fn draw_meta(cfg: &SyntheticTaskConfig, rng: &mut ChaCha8Rng, split: Split, index: usize) -> ItemMeta {
    let c = cfg.num_archetypes;
    let e = cfg.events_per_video;
    let label = index % c;
    let template = cfg.templates[rng.random_range(0..cfg.templates.len())];
    let mut others: Vec<usize> = (0..c).filter(|&a| a != label).collect();
    others.shuffle(rng);
    // Archetypes in time order, arranged so that the answer is `label`.
    let (order, subject) = match template {
        Template::First => {
            let mut order = vec![label];
            order.extend_from_slice(&others[..e - 1]);
            (order, None)
        }
        Template::Last => {
            let mut order = others[..e - 1].to_vec();
            order.push(label);
            (order, None)
        }
        Template::Before | Template::After => {
            let subject = others[0];
            let mut rest: Vec<usize> = others[1..e - 1].to_vec();
            let pair_at = rng.random_range(0..e - 1);
            let pair = if template == Template::Before {
                [label, subject]
            } else {
                [subject, label]
            };
            let mut order = Vec::with_capacity(e);
            for i in 0..e - 1 {
                if i == pair_at {
                    order.extend(pair);
                } else {
                    order.push(rest.pop().expect("enough distractors"));
                }
            }
            (order, Some(subject))
        }
    };
    let mut slots: Vec<usize> = (0..cfg.slots()).collect();
    slots.shuffle(rng);
    let mut slots = slots[..e].to_vec();
    slots.sort_unstable();
    let events = order
        .into_iter()
        .zip(slots)
        .map(|(archetype, slot)| PlantedEvent {
            archetype,
            start_frame: slot * cfg.event_frames,
            frames: cfg.event_frames,
            y: rng.random_range(0..=cfg.height - cfg.patch),
            x: rng.random_range(0..=cfg.width - cfg.patch),
        })
        .collect();
    ItemMeta {
        split,
        index,
        events,
        template,
        subject,
        label,
    }
}

fn render_volume(
    cfg: &SyntheticTaskConfig,
    sigs: &[Vec<f64>],
    meta: &ItemMeta,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureVolume> {
    let normal = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut vol = FeatureVolume::from_fn(cfg.channels, cfg.frames, cfg.height, cfg.width, |_, _, _, _| {
        if cfg.noise > 0.0 {
            normal.sample(rng)
        } else {
            0.0
        }
    })?
    .into_tensor();
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let data = vol.data_mut();
    for ev in &meta.events {
        let sig = &sigs[ev.archetype];
        for tau in ev.start_frame..ev.start_frame + ev.frames {
            for y in ev.y..ev.y + cfg.patch {
                for x in ev.x..ev.x + cfg.patch {
                    for (ch, s) in sig.iter().enumerate() {
                        data[((ch * t + tau) * h + y) * w + x] += cfg.amplitude * s;
                    }
                }
            }
        }
    }
    FeatureVolume::new(vol)
}

/// Generated task: examples, their metadata and the shared vocabulary.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SyntheticTaskConfig,
    pub vocabulary: Vocabulary,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub meta: Vec<ItemMeta>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.config.num_archetypes
    }

    /// Answer counts per class over both splits.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for m in &self.meta {
            h[m.label] += 1;
        }
        h
    }
}

/// Rebuilds one example from its metadata.
pub fn build_example(
    cfg: &SyntheticTaskConfig,
    sigs: &[Vec<f64>],
    vocab: &Vocabulary,
    meta: &ItemMeta,
) -> Result<Example> {
    let mut rng = item_rng(cfg.seed, meta.split, meta.index);
    let drawn = draw_meta(cfg, &mut rng, meta.split, meta.index);
    if drawn != *meta {
        return Err(Error::Format(format!(
            "metadata of {:?} item {} does not match its seed",
            meta.split, meta.index
        )));
    }
    let volume = render_volume(cfg, sigs, meta, &mut rng)?;
    let question = vocab.encode(question_parse(meta.template, meta.subject)?)?;
    Ok(Example {
        volume,
        question,
        label: meta.label,
    })
}

pub fn generate_task(cfg: &SyntheticTaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sigs = signatures(cfg.num_archetypes, cfg.channels, cfg.seed)?;
    let vocabulary = Vocabulary::for_task(cfg.num_archetypes)?;
    let mut meta = Vec::with_capacity(cfg.train_size + cfg.test_size);
    let mut train = Vec::with_capacity(cfg.train_size);
    let mut test = Vec::with_capacity(cfg.test_size);
    for (split, n) in [(Split::Train, cfg.train_size), (Split::Test, cfg.test_size)] {
        for index in 0..n {
            let mut rng = item_rng(cfg.seed, split, index);
            let m = draw_meta(cfg, &mut rng, split, index);
            let volume = render_volume(cfg, &sigs, &m, &mut rng)?;
            let question = vocabulary.encode(question_parse(m.template, m.subject)?)?;
            let ex = Example {
                volume,
                question,
                label: m.label,
            };
            match split {
                Split::Train => train.push(ex),
                Split::Test => test.push(ex),
            }
            meta.push(m);
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        vocabulary,
        train,
        test,
        meta,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: u64,
    config: SyntheticTaskConfig,
}

/// Writes the dataset as line-delimited JSON: a header with version tag,
/// config hash and config, then one metadata record per item. Volumes are
/// not stored; they are regenerated from the seed.
pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let header = Header {
        version: DATASET_VERSION,
        config_hash: ds.config.hash(),
        config: ds.config.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for m in &ds.meta {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset file and regenerates every example, checking the
/// version, the config hash and that each record matches its seed.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", header.version)));
    }
    if header.config.hash() != header.config_hash {
        return Err(Error::Format("dataset config hash does not match its config".into()));
    }
    let cfg = header.config;
    cfg.validate()?;
    let sigs = signatures(cfg.num_archetypes, cfg.channels, cfg.seed)?;
    let vocabulary = Vocabulary::for_task(cfg.num_archetypes)?;
    let (mut train, mut test, mut meta) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ItemMeta = serde_json::from_str(&line)?;
        if answer_from_events(m.template, m.subject, &m.events) != Some(m.label) {
            return Err(Error::Format(format!(
                "{:?} item {}: label disagrees with events",
                m.split, m.index
            )));
        }
        let ex = build_example(&cfg, &sigs, &vocabulary, &m)?;
        match m.split {
            Split::Train => train.push(ex),
            Split::Test => test.push(ex),
        }
        meta.push(m);
    }
    Ok(Dataset {
        config: cfg,
        vocabulary,
        train,
        test,
        meta,
    })
}
