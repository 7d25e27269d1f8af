//! Synthetic ego-centric benchmark generator.
//!
//! Scenes hold videos, videos hold frames, and every video follows one
//! persistent main object (a procedural glyph keyed to its instance id) over
//! a textured background with per-frame camera jitter and brightness drift.
//! Labels are split disjointly across experiences to form a class-incremental
//! stream; 20% of each experience's videos are held out into a global test
//! set. Generation is a pure function of the spec, with every video rendered
//! from its own random substream.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;
use crate::tensor::Tensor;

/// Distinct instances rendered per category; instance `i` belongs to
/// category `i % num_categories`.
pub const INSTANCES_PER_CATEGORY: u32 = 3;

/// Documentation constants from the full-scale challenge dataset (73,905
/// train / 10,713 test images from 1110 scenes). Not used as defaults.
pub const FULL_SCALE_TRAIN_IMAGES: u32 = 73_905;
pub const FULL_SCALE_TEST_IMAGES: u32 = 10_713;
pub const FULL_SCALE_SCENES: u32 = 1_110;

const TAG_LABEL_SPLIT: u64 = 0x10;
const TAG_VIDEO_SPLIT: u64 = 0x11;
const TAG_MAIN_LABELS: u64 = 0x12;
const TAG_VIDEO: u64 = 0x13;
const TAG_COVERAGE: u64 = 0x14;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid spec field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("{labels} labels cannot cover {experiences} experiences")]
    TooFewLabels { labels: usize, experiences: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },
}

/// Which id stream drives the incremental label sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackMode {
    /// Track 2: category-level detection.
    Category,
    /// Track 3: instance-level detection of the main object.
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub num_experiences: u32,
    pub num_categories: u32,
    pub num_scenes: u32,
    pub videos_per_scene: u32,
    pub frames_per_video: u32,
    /// Square image side in pixels.
    pub image_size: u32,
    pub track_mode: TrackMode,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// Desk-scale default: the whole pipeline runs in minutes on one CPU.
    pub fn desk(track_mode: TrackMode, seed: u64) -> Self {
        BenchmarkSpec {
            num_experiences: 5,
            num_categories: 10,
            num_scenes: 10,
            videos_per_scene: 2,
            frames_per_video: 10,
            image_size: 64,
            track_mode,
            seed,
        }
    }

    pub fn num_instances(&self) -> u32 {
        self.num_categories * INSTANCES_PER_CATEGORY
    }

    /// All label ids in this spec's track mode.
    pub fn label_ids(&self) -> Vec<u32> {
        match self.track_mode {
            TrackMode::Category => (0..self.num_categories).collect(),
            TrackMode::Instance => (0..self.num_instances()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let err = |field, reason: String| Err(StreamError::InvalidSpec { field, reason });
        if self.num_experiences < 1 {
            return err("num_experiences", "must be at least 1".into());
        }
        if self.track_mode == TrackMode::Category && self.num_categories < self.num_experiences {
            return err(
                "num_categories",
                format!(
                    "{} categories cannot cover {} experiences in category mode",
                    self.num_categories, self.num_experiences
                ),
            );
        }
        if self.track_mode == TrackMode::Instance && self.num_instances() < self.num_experiences {
            return err(
                "num_categories",
                format!(
                    "{} instances cannot cover {} experiences in instance mode",
                    self.num_instances(),
                    self.num_experiences
                ),
            );
        }
        if self.num_categories < 1 {
            return err("num_categories", "must be at least 1".into());
        }
        if self.num_scenes < 1 {
            return err("num_scenes", "must be at least 1".into());
        }
        if self.videos_per_scene < 1 {
            return err("videos_per_scene", "must be at least 1".into());
        }
        if self.frames_per_video < 1 {
            return err("frames_per_video", "must be at least 1".into());
        }
        if self.image_size < 32 {
            return err("image_size", format!("{} is below 32", self.image_size));
        }
        Ok(())
    }
}

/// RGB8 raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageU8 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl ImageU8 {
    fn filled(width: u32, height: u32) -> Self {
        ImageU8 {
            width,
            height,
            data: vec![0; (width * height * 3) as usize],
        }
    }

    #[inline]
    fn put(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        for c in 0..3 {
            self.data[i + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    #[inline]
    fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [
            self.data[i] as f64 / 255.0,
            self.data[i + 1] as f64 / 255.0,
            self.data[i + 2] as f64 / 255.0,
        ]
    }

    /// Channels-first float tensor in [0, 1], shape (3, H, W).
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut t = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * 3;
                for c in 0..3 {
                    t.data_mut()[c * h * w + y * w + x] = self.data[i + c] as f64 / 255.0;
                }
            }
        }
        t
    }
}

/// Integer pixel box, corner form with exclusive max corner.
pub type PixelBox = [u32; 4];

/// One annotated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageU8,
    pub boxes: Vec<PixelBox>,
    pub category_ids: Vec<u32>,
    pub instance_ids: Vec<u32>,
    pub main_object_index: usize,
    pub video_id: u32,
    pub scene_id: u32,
    pub frame_index: u32,
}

impl Sample {
    /// Stable image stem used for raster filenames and detection dumps.
    pub fn image_name(&self) -> String {
        format!("{}_{}", self.video_id, self.frame_index)
    }

    /// Label id of object `i` under the given track mode.
    pub fn label_of(&self, i: usize, mode: TrackMode) -> u32 {
        match mode {
            TrackMode::Category => self.category_ids[i],
            TrackMode::Instance => self.instance_ids[i],
        }
    }

    pub fn main_label(&self, mode: TrackMode) -> u32 {
        self.label_of(self.main_object_index, mode)
    }
}

/// One incremental experience: its samples plus the labels it introduces.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub samples: Vec<Sample>,
    pub new_labels: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceStream {
    pub experiences: Vec<Experience>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub train: ExperienceStream,
    pub test: Vec<Sample>,
}

/// Disjoint near-even label split: a seeded shuffle chunked so sizes differ
/// by at most one, larger groups first.
pub fn split_labels(
    labels: &[u32],
    num_experiences: usize,
    seed: u64,
) -> Result<Vec<BTreeSet<u32>>, StreamError> {
    if labels.len() < num_experiences {
        return Err(StreamError::TooFewLabels {
            labels: labels.len(),
            experiences: num_experiences,
        });
    }
    let mut shuffled = labels.to_vec();
    shuffled.shuffle(&mut stream(seed, &[TAG_LABEL_SPLIT]));
    let base = shuffled.len() / num_experiences;
    let extra = shuffled.len() % num_experiences;
    let mut out = Vec::with_capacity(num_experiences);
    let mut cursor = 0;
    for e in 0..num_experiences {
        let size = base + usize::from(e < extra);
        out.push(shuffled[cursor..cursor + size].iter().copied().collect());
        cursor += size;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Glyph rendering

/// Visual identity of one instance. Derived injectively from the instance id:
/// the shape and hue follow the category, the variant index picks texture and
/// aspect, so no two instances share all parameters.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GlyphParams {
    pub shape: u32,
    pub variant: u32,
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
    pub stripe_freq: f64,
    pub aspect: f64,
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub(crate) fn glyph_params(instance_id: u32, num_categories: u32) -> GlyphParams {
    let category = instance_id % num_categories;
    let variant = instance_id / num_categories;
    // categories spread over two visual axes: five well-separated hues per
    // ring, rings alternating vivid and pastel; both stay bright against the
    // muted background, so hue plus saturation pins the category
    let n = num_categories.max(1);
    let ring = category / 5;
    let slot = category % 5;
    let hue = if n <= 5 {
        slot as f64 * (360.0 / n as f64)
    } else {
        slot as f64 * 72.0 + (ring % 2) as f64 * 36.0
    };
    let vivid = ring % 2 == 0;
    GlyphParams {
        shape: category % 10,
        variant,
        primary: hsv_to_rgb(hue, if vivid { 0.9 } else { 0.3 }, if vivid { 0.95 } else { 0.98 }),
        secondary: hsv_to_rgb(hue, if vivid { 0.9 } else { 0.95 }, if vivid { 0.45 } else { 0.8 }),
        stripe_freq: match variant {
            0 => 0.0,
            1 => 3.0,
            _ => 4.0 + variant as f64,
        },
        aspect: match variant % 3 {
            0 => 1.0,
            1 => 1.35,
            _ => 0.72,
        },
    }
}

/// Membership test on box-normalized coordinates u, v in [-1, 1].
fn glyph_inside(shape: u32, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => true,
        2 => u.abs() <= (v + 1.0) / 2.0,
        3 => u.abs() + v.abs() <= 1.0,
        4 => u.abs() <= 0.42 || v.abs() <= 0.42,
        5 => {
            let r2 = u * u + v * v;
            (0.15..=1.0f64).contains(&r2)
        }
        6 => v.abs() <= u.abs(),
        7 => (u.abs() - v.abs()).abs() <= 0.45,
        8 => u.abs() >= 0.55 || v.abs() <= 0.34,
        _ => u.abs().powf(0.8) + v.abs().powf(0.8) <= 1.0,
    }
}

fn draw_glyph(img: &mut ImageU8, bbox: PixelBox, params: &GlyphParams) {
    let [x0, y0, x1, y1] = bbox;
    let w = (x1 - x0) as f64;
    let h = (y1 - y0) as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let u = ((x - x0) as f64 + 0.5) / w * 2.0 - 1.0;
            let v = ((y - y0) as f64 + 0.5) / h * 2.0 - 1.0;
            if !glyph_inside(params.shape, u, v) {
                continue;
            }
            let striped = params.stripe_freq > 0.0
                && (std::f64::consts::PI * params.stripe_freq * if params.variant == 1 { u } else { v })
                    .sin()
                    > 0.0;
            let rgb = if striped { params.secondary } else { params.primary };
            img.put(x, y, rgb);
        }
    }
}

fn overlap_area(a: PixelBox, b: PixelBox) -> u64 {
    let w = a[2].min(b[2]).saturating_sub(a[0].max(b[0])) as u64;
    let h = a[3].min(b[3]).saturating_sub(a[1].max(b[1])) as u64;
    w * h
}

/// Cheap deterministic value noise in [0, 1) from pixel and context ids.
fn hash_noise(tags: &[u64]) -> f64 {
    let mut acc = 0x9e3779b97f4a7c15u64;
    for &t in tags {
        acc = crate::rng::mix(acc, &[t]);
    }
    (acc >> 11) as f64 / (1u64 << 53) as f64
}

// ---------------------------------------------------------------------------
// Benchmark generation

struct VideoPlan {
    scene_id: u32,
    video_id: u32,
    experience: usize,
    main_instance: u32,
    is_test: bool,
    /// Labels this test video must additionally expose as surrounding
    /// objects so the global test set covers every experience's labels.
    coverage_queue: Vec<u32>,
}

pub fn generate_benchmark(
    spec: &BenchmarkSpec,
) -> Result<(ExperienceStream, Vec<Sample>), StreamError> {
    spec.validate()?;
    let label_sets = split_labels(&spec.label_ids(), spec.num_experiences as usize, spec.seed)?;

    // Partition videos into experiences: contiguous near-even chunks,
    // earlier experiences take the remainder.
    let total_videos = (spec.num_scenes * spec.videos_per_scene) as usize;
    let num_exp = spec.num_experiences as usize;
    let base = total_videos / num_exp;
    let extra = total_videos % num_exp;
    let mut plans: Vec<VideoPlan> = Vec::with_capacity(total_videos);
    let mut vid_cursor = 0usize;
    for (e, labels) in label_sets.iter().enumerate() {
        let count = base + usize::from(e < extra);
        let mut order: Vec<u32> = labels.iter().copied().collect();
        order.shuffle(&mut stream(spec.seed, &[TAG_MAIN_LABELS, e as u64]));

        // Hold out 20% of this experience's videos (at least one when the
        // experience has two or more).
        let heldout = if count >= 2 {
            ((count as f64 * 0.2).round() as usize).max(1)
        } else {
            0
        };
        let mut slot_order: Vec<usize> = (0..count).collect();
        slot_order.shuffle(&mut stream(spec.seed, &[TAG_VIDEO_SPLIT, e as u64]));
        let test_slots: BTreeSet<usize> = slot_order[..heldout].iter().copied().collect();

        for slot in 0..count {
            let video_id = (vid_cursor + slot) as u32;
            let label = order[slot % order.len()];
            let main_instance = match spec.track_mode {
                TrackMode::Category => {
                    // Deterministic per-video variant choice within the category.
                    let variant =
                        crate::rng::mix(spec.seed, &[TAG_MAIN_LABELS, video_id as u64, 7])
                            % INSTANCES_PER_CATEGORY as u64;
                    label + spec.num_categories * variant as u32
                }
                TrackMode::Instance => label,
            };
            plans.push(VideoPlan {
                scene_id: video_id / spec.videos_per_scene,
                video_id,
                experience: e,
                main_instance,
                is_test: test_slots.contains(&slot),
                coverage_queue: Vec::new(),
            });
        }
        vid_cursor += count;
    }

    // Guarantee test-set label coverage: any label not already covered by a
    // test video's main object is queued for injection as a surrounding
    // object into a test video of its own or a later experience.
    let mode = spec.track_mode;
    let mut covered: BTreeSet<u32> = plans
        .iter()
        .filter(|p| p.is_test)
        .map(|p| match mode {
            TrackMode::Category => p.main_instance % spec.num_categories,
            TrackMode::Instance => p.main_instance,
        })
        .collect();
    for (e, labels) in label_sets.iter().enumerate() {
        for &label in labels {
            if covered.contains(&label) {
                continue;
            }
            let target = plans
                .iter_mut()
                .filter(|p| p.is_test && p.experience >= e)
                .min_by_key(|p| (p.coverage_queue.len(), p.video_id));
            if let Some(p) = target {
                p.coverage_queue.push(label);
                covered.insert(label);
            }
        }
    }

    let mut experiences: Vec<Experience> = label_sets
        .iter()
        .map(|labels| Experience {
            samples: Vec::new(),
            new_labels: labels.clone(),
        })
        .collect();
    let mut test = Vec::new();
    for plan in &plans {
        // Training clutter stays within the video's own experience: each
        // incremental task annotates only its own labels, so earlier labels
        // get no free supervision later in the stream. Test videos may mix
        // anything already introduced.
        let allowed: Vec<u32> = if plan.is_test {
            label_sets[..=plan.experience]
                .iter()
                .flat_map(|s| s.iter().copied())
                .collect()
        } else {
            label_sets[plan.experience].iter().copied().collect()
        };
        let samples = render_video(spec, plan, &allowed);
        if plan.is_test {
            test.extend(samples);
        } else {
            experiences[plan.experience].samples.extend(samples);
        }
    }

    Ok((ExperienceStream { experiences }, test))
}

/// Render all frames of one video from its own substream.
fn render_video(spec: &BenchmarkSpec, plan: &VideoPlan, allowed_labels: &[u32]) -> Vec<Sample> {
    let mut rng = stream(spec.seed, &[TAG_VIDEO, plan.scene_id as u64, plan.video_id as u64]);
    let size = spec.image_size;
    let fsize = size as f64;
    let main_params = glyph_params(plan.main_instance, spec.num_categories);

    // Scene-keyed background: base color plus a linear gradient.
    let bg_base = hsv_to_rgb(
        hash_noise(&[spec.seed, plan.scene_id as u64, 1]) * 360.0,
        0.16,
        0.32 + 0.2 * hash_noise(&[spec.seed, plan.scene_id as u64, 2]),
    );
    let grad_angle = hash_noise(&[spec.seed, plan.scene_id as u64, 3]) * std::f64::consts::TAU;
    let (gdx, gdy) = (grad_angle.cos(), grad_angle.sin());

    // Persistent main-object geometry for the whole video.
    let base_side = fsize * rng.gen_range(0.45..0.66);
    let base_w = (base_side * main_params.aspect.sqrt()).round();
    let base_h = (base_side / main_params.aspect.sqrt()).round();
    let base_cx = rng.gen_range(fsize * 0.3..fsize * 0.7);
    let base_cy = rng.gen_range(fsize * 0.3..fsize * 0.7);

    // Coverage labels ride along as persistent companion objects: sized near
    // a main object, jittered from their own substream, and placed to dodge
    // the main so the test set sees them unoccluded.
    struct Companion {
        instance: u32,
        params: GlyphParams,
        base_w: f64,
        base_h: f64,
        rng: rand_chacha::ChaCha8Rng,
    }
    let mut companions: Vec<Companion> = plan
        .coverage_queue
        .iter()
        .enumerate()
        .map(|(k, &label)| {
            let mut crng = stream(spec.seed, &[TAG_COVERAGE, plan.video_id as u64, k as u64]);
            let instance = match spec.track_mode {
                TrackMode::Category => {
                    label + spec.num_categories * crng.gen_range(0..INSTANCES_PER_CATEGORY)
                }
                TrackMode::Instance => label,
            };
            let params = glyph_params(instance, spec.num_categories);
            let side = fsize * crng.gen_range(0.38..0.52);
            Companion {
                instance,
                base_w: (side * params.aspect.sqrt()).round(),
                base_h: (side / params.aspect.sqrt()).round(),
                params,
                rng: crng,
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.frames_per_video as usize);
    for frame in 0..spec.frames_per_video {
        let mut img = ImageU8::filled(size, size);
        for y in 0..size {
            for x in 0..size {
                let t = (x as f64 * gdx + y as f64 * gdy) / fsize * 0.18;
                let n = (hash_noise(&[
                    spec.seed,
                    plan.video_id as u64,
                    frame as u64,
                    (y * size + x) as u64,
                ]) - 0.5)
                    * 0.06;
                img.put(
                    x,
                    y,
                    [bg_base[0] + t + n, bg_base[1] + t + n, bg_base[2] + t + n],
                );
            }
        }

        let mut boxes = Vec::new();
        let mut category_ids = Vec::new();
        let mut instance_ids = Vec::new();

        // Camera motion: per-frame translation and scale of the main object.
        // Computed up front so companions can be placed away from it; drawing
        // still happens back to front.
        let scale = rng.gen_range(0.88..1.15);
        let dx = rng.gen_range(-0.07..0.07) * fsize;
        let dy = rng.gen_range(-0.07..0.07) * fsize;
        let w = ((base_w * scale).round() as u32).clamp(8, size);
        let h = ((base_h * scale).round() as u32).clamp(8, size);
        let cx = (base_cx + dx).clamp(w as f64 / 2.0, fsize - w as f64 / 2.0);
        let cy = (base_cy + dy).clamp(h as f64 / 2.0, fsize - h as f64 / 2.0);
        let x0 = ((cx - w as f64 / 2.0).round() as u32).min(size - w);
        let y0 = ((cy - h as f64 / 2.0).round() as u32).min(size - h);
        let main_box = [x0, y0, x0 + w, y0 + h];

        // Surrounding clutter first so everything else draws on top.
        let count = rng.gen_range(0..=3usize);
        for _ in 0..count {
            if allowed_labels.is_empty() {
                break;
            }
            let label = allowed_labels[rng.gen_range(0..allowed_labels.len())];
            let instance = match spec.track_mode {
                TrackMode::Category => {
                    label + spec.num_categories * rng.gen_range(0..INSTANCES_PER_CATEGORY)
                }
                TrackMode::Instance => label,
            };
            let params = glyph_params(instance, spec.num_categories);
            let side = fsize * rng.gen_range(0.26..0.38);
            let w = ((side * params.aspect.sqrt()).round() as u32).clamp(6, size);
            let h = ((side / params.aspect.sqrt()).round() as u32).clamp(6, size);
            let x0 = rng.gen_range(0..=(size - w));
            let y0 = rng.gen_range(0..=(size - h));
            let bbox = [x0, y0, x0 + w, y0 + h];
            draw_glyph(&mut img, bbox, &params);
            boxes.push(bbox);
            category_ids.push(instance % spec.num_categories);
            instance_ids.push(instance);
        }

        // Companions: pick the least-main-overlapping of six candidate spots.
        for comp in companions.iter_mut() {
            let scale = comp.rng.gen_range(0.9..1.1);
            let w = ((comp.base_w * scale).round() as u32).clamp(8, size);
            let h = ((comp.base_h * scale).round() as u32).clamp(8, size);
            let mut best: Option<([u32; 4], u64)> = None;
            for _ in 0..6 {
                let x0 = comp.rng.gen_range(0..=(size - w));
                let y0 = comp.rng.gen_range(0..=(size - h));
                let cand = [x0, y0, x0 + w, y0 + h];
                let ov = overlap_area(cand, main_box);
                if best.map_or(true, |(_, b)| ov < b) {
                    best = Some((cand, ov));
                }
            }
            let (bbox, _) = best.expect("six candidates");
            draw_glyph(&mut img, bbox, &comp.params);
            boxes.push(bbox);
            category_ids.push(comp.instance % spec.num_categories);
            instance_ids.push(comp.instance);
        }

        draw_glyph(&mut img, main_box, &main_params);
        let main_object_index = boxes.len();
        boxes.push(main_box);
        category_ids.push(plan.main_instance % spec.num_categories);
        instance_ids.push(plan.main_instance);

        // Global brightness drift.
        let brightness = rng.gen_range(0.92..1.08);
        for y in 0..size {
            for x in 0..size {
                let px = img.get(x, y);
                img.put(x, y, [px[0] * brightness, px[1] * brightness, px[2] * brightness]);
            }
        }

        samples.push(Sample {
            image: img,
            boxes,
            category_ids,
            instance_ids,
            main_object_index,
            video_id: plan.video_id,
            scene_id: plan.scene_id,
            frame_index: frame,
        });
    }
    samples
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    image: String,
    boxes: Vec<PixelBox>,
    category_ids: Vec<u32>,
    instance_ids: Vec<u32>,
    main_object_index: usize,
    video_id: u32,
    scene_id: u32,
    frame_index: u32,
}

#[derive(Serialize, Deserialize)]
struct ExperienceRecord {
    new_labels: Vec<u32>,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: BenchmarkSpec,
    experiences: Vec<ExperienceRecord>,
    test: Vec<SampleRecord>,
}

fn sample_record(s: &Sample) -> SampleRecord {
    SampleRecord {
        image: format!("images/{}.png", s.image_name()),
        boxes: s.boxes.clone(),
        category_ids: s.category_ids.clone(),
        instance_ids: s.instance_ids.clone(),
        main_object_index: s.main_object_index,
        video_id: s.video_id,
        scene_id: s.scene_id,
        frame_index: s.frame_index,
    }
}

fn write_png(path: &Path, img: &ImageU8) -> Result<(), StreamError> {
    let buf = image::RgbImage::from_raw(img.width, img.height, img.data.clone())
        .expect("image buffer size");
    image::DynamicImage::ImageRgb8(buf)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| StreamError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn read_png(path: &Path) -> Result<ImageU8, StreamError> {
    if !path.exists() {
        return Err(StreamError::Integrity(format!(
            "manifest references missing image file {}",
            path.display()
        )));
    }
    let img = image::open(path)
        .map_err(|e| StreamError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(ImageU8 {
        width: img.width(),
        height: img.height(),
        data: img.into_raw(),
    })
}

/// Write `<root>/manifest.json` plus `<root>/images/<video>_<frame>.png`.
/// Returns the manifest path.
pub fn serialize_benchmark(benchmark: &Benchmark, directory: &Path) -> Result<PathBuf, StreamError> {
    let images_dir = directory.join("images");
    fs::create_dir_all(&images_dir)?;
    let manifest = Manifest {
        spec: benchmark.spec.clone(),
        experiences: benchmark
            .train
            .experiences
            .iter()
            .map(|e| ExperienceRecord {
                new_labels: e.new_labels.iter().copied().collect(),
                samples: e.samples.iter().map(sample_record).collect(),
            })
            .collect(),
        test: benchmark.test.iter().map(sample_record).collect(),
    };
    for s in benchmark
        .train
        .experiences
        .iter()
        .flat_map(|e| e.samples.iter())
        .chain(benchmark.test.iter())
    {
        write_png(&images_dir.join(format!("{}.png", s.image_name())), &s.image)?;
    }
    let manifest_path = directory.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json)?;
    Ok(manifest_path)
}

fn load_sample(root: &Path, rec: &SampleRecord, spec: &BenchmarkSpec) -> Result<Sample, StreamError> {
    let image = read_png(&root.join(&rec.image))?;
    if image.width != spec.image_size || image.height != spec.image_size {
        return Err(StreamError::Integrity(format!(
            "image {} is {}x{}, spec says {}",
            rec.image, image.width, image.height, spec.image_size
        )));
    }
    if rec.boxes.len() != rec.category_ids.len() || rec.boxes.len() != rec.instance_ids.len() {
        return Err(StreamError::Integrity(format!(
            "image {}: {} boxes, {} category ids, {} instance ids",
            rec.image,
            rec.boxes.len(),
            rec.category_ids.len(),
            rec.instance_ids.len()
        )));
    }
    if rec.main_object_index >= rec.boxes.len() {
        return Err(StreamError::Integrity(format!(
            "image {}: main object index {} out of range",
            rec.image, rec.main_object_index
        )));
    }
    for b in &rec.boxes {
        if !(b[0] < b[2] && b[1] < b[3] && b[2] <= spec.image_size && b[3] <= spec.image_size) {
            return Err(StreamError::Integrity(format!(
                "image {}: box {:?} outside {}px bounds",
                rec.image, b, spec.image_size
            )));
        }
    }
    Ok(Sample {
        image,
        boxes: rec.boxes.clone(),
        category_ids: rec.category_ids.clone(),
        instance_ids: rec.instance_ids.clone(),
        main_object_index: rec.main_object_index,
        video_id: rec.video_id,
        scene_id: rec.scene_id,
        frame_index: rec.frame_index,
    })
}

/// Read a benchmark back from its manifest; validates label-set disjointness,
/// box bounds, and image presence.
pub fn load_benchmark(manifest_path: &Path) -> Result<Benchmark, StreamError> {
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| StreamError::Parse {
            path: manifest_path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;

    for (i, a) in manifest.experiences.iter().enumerate() {
        for b in &manifest.experiences[i + 1..] {
            if a.new_labels.iter().any(|l| b.new_labels.contains(l)) {
                return Err(StreamError::Integrity(format!(
                    "experience label sets are not disjoint (experience {i})"
                )));
            }
        }
    }

    let mut experiences = Vec::new();
    for rec in &manifest.experiences {
        let mut samples = Vec::new();
        for s in &rec.samples {
            samples.push(load_sample(&root, s, &manifest.spec)?);
        }
        experiences.push(Experience {
            samples,
            new_labels: rec.new_labels.iter().copied().collect(),
        });
    }
    let mut test = Vec::new();
    for s in &manifest.test {
        test.push(load_sample(&root, s, &manifest.spec)?);
    }
    Ok(Benchmark {
        spec: manifest.spec,
        train: ExperienceStream { experiences },
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> BenchmarkSpec {
        BenchmarkSpec {
            num_experiences: 2,
            num_categories: 4,
            num_scenes: 3,
            videos_per_scene: 2,
            frames_per_video: 3,
            image_size: 32,
            track_mode: TrackMode::Category,
            seed: 7,
        }
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let mut s = tiny_spec();
        s.image_size = 31;
        assert!(matches!(
            s.validate(),
            Err(StreamError::InvalidSpec { field: "image_size", .. })
        ));
        let mut s = tiny_spec();
        s.num_experiences = 0;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.num_categories = 1;
        assert!(matches!(
            s.validate(),
            Err(StreamError::InvalidSpec { field: "num_categories", .. })
        ));
    }

    #[test]
    fn split_labels_examples() {
        let sizes = |sets: &[BTreeSet<u32>]| sets.iter().map(|s| s.len()).collect::<Vec<_>>();
        let ten: Vec<u32> = (0..10).collect();
        assert_eq!(sizes(&split_labels(&ten, 5, 1).unwrap()), vec![2; 5]);
        let seven: Vec<u32> = (0..7).collect();
        assert_eq!(sizes(&split_labels(&seven, 5, 1).unwrap()), vec![2, 2, 1, 1, 1]);
        let five: Vec<u32> = (0..5).collect();
        assert_eq!(sizes(&split_labels(&five, 5, 1).unwrap()), vec![1; 5]);
        assert!(split_labels(&five, 6, 1).is_err());
    }

    #[test]
    fn split_labels_disjoint_cover() {
        let labels: Vec<u32> = (0..13).collect();
        let sets = split_labels(&labels, 4, 99).unwrap();
        let mut all: Vec<u32> = sets.iter().flat_map(|s| s.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, labels);
    }

    #[test]
    fn five_experience_default_has_five() {
        let spec = BenchmarkSpec::desk(TrackMode::Category, 3);
        let (train, _) = generate_benchmark(&spec).unwrap();
        assert_eq!(train.experiences.len(), 5);
    }

    #[test]
    fn minimal_spec_yields_one_sample() {
        let spec = BenchmarkSpec {
            num_experiences: 1,
            num_categories: 1,
            num_scenes: 1,
            videos_per_scene: 1,
            frames_per_video: 1,
            image_size: 32,
            track_mode: TrackMode::Category,
            seed: 5,
        };
        let (train, test) = generate_benchmark(&spec).unwrap();
        assert_eq!(train.experiences.len(), 1);
        assert_eq!(train.experiences[0].samples.len(), 1);
        assert!(test.is_empty());
        let s = &train.experiences[0].samples[0];
        assert!(!s.boxes.is_empty());
        assert!(s.main_object_index < s.boxes.len());
    }

    fn check_stream_invariants(spec: &BenchmarkSpec, train: &ExperienceStream, test: &[Sample]) {
        for (i, a) in train.experiences.iter().enumerate() {
            for b in &train.experiences[i + 1..] {
                assert!(a.new_labels.is_disjoint(&b.new_labels));
            }
        }
        let all: Vec<&Sample> = train
            .experiences
            .iter()
            .flat_map(|e| e.samples.iter())
            .chain(test.iter())
            .collect();
        for s in &all {
            assert_eq!(s.boxes.len(), s.category_ids.len());
            assert_eq!(s.boxes.len(), s.instance_ids.len());
            assert!(s.main_object_index < s.boxes.len());
            for b in &s.boxes {
                assert!(b[0] < b[2] && b[1] < b[3]);
                assert!(b[2] <= spec.image_size && b[3] <= spec.image_size);
            }
        }
        for e in &train.experiences {
            for s in &e.samples {
                assert!(e.new_labels.contains(&s.main_label(spec.track_mode)));
            }
        }
        // every frame of a video shares the main instance
        let mut mains: std::collections::BTreeMap<u32, u32> = Default::default();
        for s in &all {
            let inst = s.instance_ids[s.main_object_index];
            let prev = mains.entry(s.video_id).or_insert(inst);
            assert_eq!(*prev, inst);
        }
    }

    #[test]
    fn stream_invariants_hold_both_tracks() {
        for mode in [TrackMode::Category, TrackMode::Instance] {
            let spec = BenchmarkSpec::desk(mode, 11);
            let (train, test) = generate_benchmark(&spec).unwrap();
            check_stream_invariants(&spec, &train, &test);
        }
    }

    #[test]
    fn test_set_covers_all_labels() {
        for mode in [TrackMode::Category, TrackMode::Instance] {
            let spec = BenchmarkSpec::desk(mode, 21);
            let (train, test) = generate_benchmark(&spec).unwrap();
            let needed: BTreeSet<u32> = train
                .experiences
                .iter()
                .flat_map(|e| e.new_labels.iter().copied())
                .collect();
            let mut present = BTreeSet::new();
            for s in &test {
                for i in 0..s.boxes.len() {
                    present.insert(s.label_of(i, mode));
                }
            }
            assert!(
                needed.is_subset(&present),
                "{mode:?}: missing {:?}",
                needed.difference(&present).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn surrounding_labels_only_from_introduced_experiences() {
        let spec = BenchmarkSpec::desk(TrackMode::Category, 31);
        let (train, _) = generate_benchmark(&spec).unwrap();
        let mut seen_so_far = BTreeSet::new();
        for e in &train.experiences {
            seen_so_far.extend(e.new_labels.iter().copied());
            for s in &e.samples {
                for i in 0..s.boxes.len() {
                    assert!(seen_so_far.contains(&s.label_of(i, spec.track_mode)));
                }
            }
        }
    }

    #[test]
    fn glyph_params_injective() {
        let num_categories = 10;
        let mut seen = Vec::new();
        for inst in 0..num_categories * INSTANCES_PER_CATEGORY {
            let p = glyph_params(inst, num_categories);
            assert!(
                !seen.contains(&p),
                "instance {inst} duplicates earlier glyph params"
            );
            seen.push(p);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let (t1, s1) = generate_benchmark(&spec).unwrap();
        let (t2, s2) = generate_benchmark(&spec).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn serialized_output_is_byte_identical() {
        use sha2::{Digest, Sha256};
        let spec = tiny_spec();
        let mut hashes = Vec::new();
        for _ in 0..2 {
            let (train, test) = generate_benchmark(&spec).unwrap();
            let b = Benchmark { spec: spec.clone(), train, test };
            let dir = tempfile::tempdir().unwrap();
            let manifest = serialize_benchmark(&b, dir.path()).unwrap();
            let mut hasher = Sha256::new();
            hasher.update(fs::read(&manifest).unwrap());
            let mut names: Vec<_> = fs::read_dir(dir.path().join("images"))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            names.sort();
            for p in names {
                hasher.update(p.file_name().unwrap().to_string_lossy().as_bytes());
                hasher.update(fs::read(p).unwrap());
            }
            hashes.push(hasher.finalize());
        }
        assert_eq!(hashes[0], hashes[1]);
    }

    #[test]
    fn serialize_load_round_trip() {
        let spec = tiny_spec();
        let (train, test) = generate_benchmark(&spec).unwrap();
        let b = Benchmark { spec, train, test };
        let dir = tempfile::tempdir().unwrap();
        let manifest = serialize_benchmark(&b, dir.path()).unwrap();
        let loaded = load_benchmark(&manifest).unwrap();
        assert_eq!(b, loaded);
    }

    #[test]
    fn missing_image_is_integrity_error() {
        let spec = tiny_spec();
        let (train, test) = generate_benchmark(&spec).unwrap();
        let b = Benchmark { spec, train, test };
        let dir = tempfile::tempdir().unwrap();
        let manifest = serialize_benchmark(&b, dir.path()).unwrap();
        let victim = fs::read_dir(dir.path().join("images"))
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        fs::remove_file(victim).unwrap();
        match load_benchmark(&manifest) {
            Err(StreamError::Integrity(msg)) => assert!(msg.contains("missing image")),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_manifest_is_parse_error_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, "{\"spec\": not json").unwrap();
        match load_benchmark(&path) {
            Err(StreamError::Parse { line, column, .. }) => {
                assert!(line >= 1 && column >= 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_lists_disjoint_experience_records() {
        let spec = BenchmarkSpec::desk(TrackMode::Category, 13);
        let (train, test) = generate_benchmark(&spec).unwrap();
        let b = Benchmark { spec, train, test };
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = serialize_benchmark(&b, dir.path()).unwrap();
        // validation pass over the manifest text itself
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
        let exps = manifest["experiences"].as_array().unwrap();
        assert_eq!(exps.len(), 5);
        let sets: Vec<BTreeSet<i64>> = exps
            .iter()
            .map(|e| {
                e["new_labels"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_i64().unwrap())
                    .collect()
            })
            .collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
    }

    #[test]
    fn image_tensor_is_normalized() {
        let spec = tiny_spec();
        let (train, _) = generate_benchmark(&spec).unwrap();
        let t = train.experiences[0].samples[0].image.to_tensor();
        assert_eq!(t.shape(), &[3, 32, 32]);
        assert!(t.iter().all(|v| (0.0..=1.0f64).contains(&v)));
    }
}
