//! Synthetic moving-shapes grounding benchmark.
//!
//! Every video shows colored geometric shapes moving linearly over a black
//! background. The sentence names one subject shape by color and kind (the
//! entity span) and describes its motion; the ground-truth tube tracks that
//! shape. In untrimmed mode the subject is only visible inside a random window.

use candle::{Device, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, EntitySpan, FrameSource, GroundingSample};
use super::tokenize::{split_words, Vocab};
use super::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{BBox, TemporalSpan, Tube};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether pixel point `(px, py)` lies inside a shape of size `s` centered at `(cx, cy)`.
    fn covers(&self, px: f64, py: f64, cx: f64, cy: f64, s: f64) -> bool {
        let r = 0.5 * s;
        match self {
            ShapeKind::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeKind::Triangle => {
                let top = cy - r;
                let depth = py - top;
                (0.0..=s).contains(&depth) && (px - cx).abs() <= 0.5 * depth
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 6] = [
        ShapeColor::Red,
        ShapeColor::Green,
        ShapeColor::Blue,
        ShapeColor::Yellow,
        ShapeColor::Magenta,
        ShapeColor::Cyan,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
            ShapeColor::Magenta => "magenta",
            ShapeColor::Cyan => "cyan",
        }
    }

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            ShapeColor::Red => [230, 30, 30],
            ShapeColor::Green => [30, 200, 40],
            ShapeColor::Blue => [40, 60, 240],
            ShapeColor::Yellow => [235, 220, 30],
            ShapeColor::Magenta => [220, 40, 220],
            ShapeColor::Cyan => [30, 220, 225],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];

    pub fn word(&self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
        }
    }

    fn direction(&self) -> (f64, f64) {
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
        }
    }
}

const TEMPLATES: [&str; 3] = ["the {c} {k} moving {m}", "the {c} {k} that moves {m}", "a {c} {k} is going {m}"];
const RELATIONS: [&str; 2] = ["past the", "near the"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub num_frames: usize,
    pub image_size: usize,
    pub kinds: Vec<ShapeKind>,
    pub colors: Vec<ShapeColor>,
    pub motions: Vec<Motion>,
    /// Inclusive range of distractor shapes per video.
    pub distractors: [usize; 2],
    /// Shape side length as a fraction of the image, inclusive range.
    pub shape_size: [f64; 2],
    /// Total displacement over the visible frames, fraction of the image.
    pub displacement: [f64; 2],
    /// When set, the subject is visible only in a window of this many frames.
    pub untrimmed_window: Option<[usize; 2]>,
    /// Distractors never share the subject's color (not only its color+kind pair).
    pub distinct_colors: bool,
    pub seed: u64,
    pub split: String,
    pub fps: f64,
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 16,
            num_frames: 8,
            image_size: 64,
            kinds: ShapeKind::ALL.to_vec(),
            colors: ShapeColor::ALL.to_vec(),
            motions: Motion::ALL.to_vec(),
            distractors: [1, 2],
            shape_size: [0.22, 0.32],
            displacement: [0.15, 0.4],
            untrimmed_window: None,
            distinct_colors: true,
            seed: 0,
            split: "train".into(),
            fps: 5.0,
            id_prefix: "synth".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.num_videos == 0 || self.num_frames == 0 || self.image_size < 4 {
            return bad("num_videos, num_frames must be ≥ 1 and image_size ≥ 4");
        }
        if self.kinds.is_empty() || self.colors.is_empty() || self.motions.is_empty() {
            return bad("shape inventory must be non-empty");
        }
        if self.distractors[0] > self.distractors[1] {
            return bad("distractors range is reversed");
        }
        let [lo, hi] = self.shape_size;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad("shape_size must satisfy 0 < min <= max < 1");
        }
        let [dlo, dhi] = self.displacement;
        if !(dlo >= 0.0 && dlo <= dhi && dhi < 1.0) {
            return bad("displacement must satisfy 0 <= min <= max < 1");
        }
        if let Some([a, b]) = self.untrimmed_window {
            if a == 0 || a > b || b > self.num_frames {
                return bad("untrimmed_window must satisfy 1 <= min <= max <= num_frames");
            }
        }
        if self.distractors[1] > 0 {
            let alt = if self.distinct_colors {
                self.colors.len() > 1
            } else {
                self.colors.len() * self.kinds.len() > 1
            };
            if !alt {
                return bad("inventory too small to draw distractors distinct from the subject");
            }
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        Ok(())
    }

    /// The vocabulary every generated sentence is drawn from.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<String> = TEMPLATES
            .iter()
            .chain(RELATIONS.iter())
            .flat_map(|t| split_words(t))
            .filter(|w| !w.starts_with('{'))
            .collect();
        words.extend(self.colors.iter().map(|c| c.word().to_string()));
        words.extend(self.kinds.iter().map(|k| k.word().to_string()));
        words.extend(self.motions.iter().map(|m| m.word().to_string()));
        words.retain(|w| !["c", "k", "m"].contains(&w.as_str()));
        Vocab::from_words(words)
    }
}

/// One rendered shape track.
#[derive(Clone, Debug)]
struct Track {
    kind: ShapeKind,
    color: ShapeColor,
    size: f64,
    start: (f64, f64),
    end: (f64, f64),
    visible: TemporalSpan,
}

impl Track {
    fn center(&self, t: usize) -> (f64, f64) {
        let n = self.visible.len();
        let a = if n <= 1 {
            0.0
        } else {
            (t - self.visible.start_frame) as f64 / (n - 1) as f64
        };
        (
            self.start.0 + a * (self.end.0 - self.start.0),
            self.start.1 + a * (self.end.1 - self.start.1),
        )
    }

    fn bbox(&self, t: usize, image: f64) -> BBox {
        let (cx, cy) = self.center(t);
        BBox::new(cx / image, cy / image, self.size / image, self.size / image)
    }
}

fn sample_track(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    kind: ShapeKind,
    color: ShapeColor,
    motion: Motion,
    visible: TemporalSpan,
) -> Track {
    let image = spec.image_size as f64;
    let size = rng.random_range(spec.shape_size[0]..=spec.shape_size[1]) * image;
    let room = image - size;
    let disp = (rng.random_range(spec.displacement[0]..=spec.displacement[1]) * image).min(room);
    let (dx, dy) = motion.direction();
    let r = 0.5 * size;
    // moving axis: start so the whole path stays in the frame
    let mut pick = |moving: f64| -> (f64, f64) {
        if moving != 0.0 {
            let lo = r;
            let hi = image - r - disp;
            let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            if moving > 0.0 {
                (s, s + disp)
            } else {
                (s + disp, s)
            }
        } else {
            let c = rng.random_range(r..=image - r);
            (c, c)
        }
    };
    let (x0, x1) = pick(dx);
    let (y0, y1) = pick(dy);
    Track {
        kind,
        color,
        size,
        start: (x0, y0),
        end: (x1, y1),
        visible,
    }
}

fn render(spec: &SynthSpec, tracks: &[Track]) -> Vec<u8> {
    let n = spec.image_size;
    let plane = n * n;
    let mut buf = vec![0u8; spec.num_frames * 3 * plane];
    for t in 0..spec.num_frames {
        let frame = &mut buf[t * 3 * plane..(t + 1) * 3 * plane];
        for tr in tracks.iter().filter(|tr| tr.visible.contains(t)) {
            let (cx, cy) = tr.center(t);
            let rgb = tr.color.rgb();
            let r = 0.5 * tr.size;
            let y_lo = ((cy - r).floor().max(0.0)) as usize;
            let y_hi = ((cy + r).ceil() as usize).min(n);
            let x_lo = ((cx - r).floor().max(0.0)) as usize;
            let x_hi = ((cx + r).ceil() as usize).min(n);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    if tr.kind.covers(x as f64 + 0.5, y as f64 + 0.5, cx, cy, tr.size) {
                        for (c, v) in rgb.iter().enumerate() {
                            frame[c * plane + y * n + x] = *v;
                        }
                    }
                }
            }
        }
    }
    buf
}

fn sentence(rng: &mut ChaCha8Rng, subject: &Track, motion: Motion, distractor: Option<&Track>) -> String {
    let template = TEMPLATES.choose(rng).expect("templates");
    let mut s = template
        .replace("{c}", subject.color.word())
        .replace("{k}", subject.kind.word())
        .replace("{m}", motion.word());
    if let Some(d) = distractor {
        let rel = RELATIONS.choose(rng).expect("relations");
        s.push_str(&format!(" {rel} {} {}", d.color.word(), d.kind.word()));
    }
    s
}

/// Generate a dataset; identical specs give identical bytes.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = spec.vocab();
    let image = spec.image_size as f64;
    let full = TemporalSpan::full(spec.num_frames)?;
    let mut samples = Vec::with_capacity(spec.num_videos);
    let mut frames = Vec::with_capacity(spec.num_videos);

    for v in 0..spec.num_videos {
        let video_id = format!("{}-{v:05}", spec.id_prefix);
        let kind = *spec.kinds.choose(&mut rng).expect("kinds");
        let color = *spec.colors.choose(&mut rng).expect("colors");
        let motion = *spec.motions.choose(&mut rng).expect("motions");
        let visible = match spec.untrimmed_window {
            None => full,
            Some([lo, hi]) => {
                let len = rng.random_range(lo..=hi);
                let start = rng.random_range(0..=spec.num_frames - len);
                TemporalSpan::new(start, start + len - 1)?
            }
        };
        let subject = sample_track(&mut rng, spec, kind, color, motion, visible);

        let count = rng.random_range(spec.distractors[0]..=spec.distractors[1]);
        let candidates: Vec<(ShapeColor, ShapeKind)> = spec
            .colors
            .iter()
            .flat_map(|&c| spec.kinds.iter().map(move |&k| (c, k)))
            .filter(|&(c, k)| if spec.distinct_colors { c != color } else { (c, k) != (color, kind) })
            .collect();
        let mut distractors = Vec::with_capacity(count);
        for _ in 0..count {
            let &(dc, dk) = candidates.choose(&mut rng).expect("checked by validate");
            let dm = *spec.motions.choose(&mut rng).expect("motions");
            distractors.push(sample_track(&mut rng, spec, dk, dc, dm, full));
        }

        let text = sentence(&mut rng, &subject, motion, distractors.first());
        let mut tracks = distractors;
        tracks.push(subject.clone());
        let pixels = render(spec, &tracks);
        frames.push(Tensor::from_vec(
            pixels,
            (spec.num_frames, 3, spec.image_size, spec.image_size),
            &Device::Cpu,
        )?);

        let tube = Tube::new(visible, visible.frames().map(|t| subject.bbox(t, image)).collect())?;
        samples.push(GroundingSample {
            video_id: video_id.clone(),
            frames: FrameSource::Raw {
                path: format!("frames/{video_id}.safetensors").into(),
                num_frames: spec.num_frames,
                height: spec.image_size,
                width: spec.image_size,
            },
            sentence: text,
            target_id: "subject".into(),
            gt_tube: tube,
            entity_spans: vec![EntitySpan {
                word_start: 1,
                word_end: 2,
                target_id: "subject".into(),
            }],
            trimmed: spec.untrimmed_window.is_none(),
        });
    }

    let manifest = DatasetManifest {
        split: spec.split.clone(),
        fps: spec.fps,
        vocab,
        samples,
        root: Default::default(),
    };
    manifest.validate()?;
    Dataset::from_parts(manifest, frames)
}
