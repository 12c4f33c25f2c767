//! Synthetic image-text corpus with an engineered gap between data sources.
//!
//! Two training sources are generated: a labeled source of clean, bright,
//! centered renders over the 16 "seen" classes, and a caption source of
//! darker, cluttered, off-center renders covering all 24 classes, paired
//! with grammar-generated captions. Class synonyms occur only in captions;
//! the template marker words (photo, image, ...) occur only in label
//! prompts. That separation is what the prefix conditioning experiments
//! measure, so the generator enforces it and the tests assert it.
//!
//! All randomness flows through per-item named streams from one seed, so a
//! dataset is a pure function of its config.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageEncoderConfig, ImageSample};
use crate::rng::Rng;

pub const TOTAL_CLASSES: usize = 24;
pub const SEEN_CLASSES: usize = 16;
/// Floor on zero-shot test images per class; accuracy gaps between nearby
/// configurations drown in sampling noise below this.
pub const MIN_EVAL_PER_CLASS: usize = 20;

const SHAPES: usize = 8;
const PALETTES: [[f64; 3]; 3] = [
    [0.85, 0.25, 0.20],
    [0.20, 0.35, 0.90],
    [0.92, 0.78, 0.15],
];
const ATTRIBUTES: [&str; 3] = ["russet", "cobalt", "auric"];
const RELATIONS: [&str; 4] = ["near", "beside", "under", "atop"];
const CONTEXTS: [&str; 8] = ["meadow", "harbor", "cavern", "dune", "thicket", "plaza", "ridge", "lagoon"];

const CLASS_WORDS: [(&str, &str); TOTAL_CLASSES] = [
    ("blorp", "glommet"),
    ("trisk", "skelt"),
    ("quindle", "quopp"),
    ("marniv", "narvel"),
    ("zumper", "zindle"),
    ("grellet", "grulp"),
    ("fonnick", "fimble"),
    ("waxlet", "wexin"),
    ("dramble", "drobbin"),
    ("peltran", "pelquin"),
    ("shindle", "shennet"),
    ("crovert", "crandel"),
    ("lumpkin", "lumbet"),
    ("tarnok", "tarsel"),
    ("vexford", "vexil"),
    ("osprell", "osket"),
    ("yarble", "yarrin"),
    ("dockel", "dobbin"),
    ("hintop", "hinlet"),
    ("murkle", "murfin"),
    ("sablet", "sarnel"),
    ("ringold", "rinket"),
    ("fenwick", "fenndel"),
    ("calmor", "calvet"),
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("batch_size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("source_ratio must lie strictly between 0 and 1, got {0}")]
    BadSourceRatio(f64),
    #[error("sampler needs a nonempty {0} source")]
    EmptySource(&'static str),
    #[error("dataset sizes must be positive")]
    EmptyConfig,
    #[error("zero-shot eval needs at least {MIN_EVAL_PER_CLASS} images per class, got {0}")]
    EvalSplitTooSmall(usize),
    #[error("catalog file: {0}")]
    CatalogFormat(String),
    #[error("template file: {0}")]
    TemplateFormat(String),
    #[error("image set dump: {0}")]
    DumpFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One renderable concept: an invented name, a caption-only synonym, and a
/// deterministic visual identity (shape and palette).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSpec {
    pub id: usize,
    pub name: String,
    pub synonym: String,
    /// Present in the labeled source; the remaining classes exist only in
    /// caption data.
    pub seen: bool,
    shape: usize,
    palette: usize,
}

impl ClassSpec {
    fn at(id: usize, name: &str, synonym: &str, seen: bool) -> ClassSpec {
        ClassSpec {
            id,
            name: name.to_string(),
            synonym: synonym.to_string(),
            seen,
            // shape and palette cycle at coprime periods, so every class
            // gets a unique pair and every palette shows up in both the
            // labeled and the caption-only id ranges
            shape: id % SHAPES,
            palette: id % PALETTES.len(),
        }
    }

    pub fn attribute(&self) -> &'static str {
        ATTRIBUTES[self.palette]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCatalog {
    pub classes: Vec<ClassSpec>,
}

impl ClassCatalog {
    pub fn standard() -> ClassCatalog {
        let classes = CLASS_WORDS
            .iter()
            .enumerate()
            .map(|(id, (name, syn))| ClassSpec::at(id, name, syn, id < SEEN_CLASSES))
            .collect();
        ClassCatalog { classes }
    }

    pub fn class(&self, id: usize) -> &ClassSpec {
        &self.classes[id]
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.seen).map(|c| c.id).collect()
    }

    pub fn caption_only_ids(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| !c.seen).map(|c| c.id).collect()
    }

    /// Parses the catalog interchange format: a header line then
    /// `class_id,name,synonym,seen_in_labels` rows with contiguous ids.
    pub fn from_csv_text(text: &str) -> Result<ClassCatalog, DataError> {
        let bad = |msg: String| DataError::CatalogFormat(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "class_id,name,synonym,seen_in_labels" => {}
            other => return Err(bad(format!("bad header {other:?}"))),
        }
        let mut classes = Vec::new();
        let mut words = std::collections::HashSet::new();
        for line in lines {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}: {line:?}", f.len())));
            }
            let id: usize = f[0].parse().map_err(|_| bad(format!("bad class_id {:?}", f[0])))?;
            if id != classes.len() {
                return Err(bad(format!("class ids must be contiguous from 0, got {id}")));
            }
            let seen = match f[3] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("seen_in_labels must be 0 or 1, got {other:?}"))),
            };
            for w in [f[1], f[2]] {
                let w = w.to_lowercase();
                if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
                    return Err(bad(format!("words must be nonempty ascii letters, got {w:?}")));
                }
                if !words.insert(w) {
                    return Err(bad(format!("duplicate word {:?}", f[1])));
                }
            }
            classes.push(ClassSpec::at(id, &f[1].to_lowercase(), &f[2].to_lowercase(), seen));
        }
        if classes.is_empty() {
            return Err(bad("no classes".into()));
        }
        Ok(ClassCatalog { classes })
    }

    pub fn to_csv_text(&self) -> String {
        let mut out = String::from("class_id,name,synonym,seen_in_labels\n");
        for c in &self.classes {
            out.push_str(&format!("{},{},{},{}\n", c.id, c.name, c.synonym, c.seen as u8));
        }
        out
    }
}

/// Prompt templates for label data; `{}` is the class-name slot. The marker
/// words here never appear in captions.
#[derive(Debug, Clone)]
pub struct PromptTemplateSet {
    pub templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn standard() -> PromptTemplateSet {
        PromptTemplateSet {
            templates: [
                "a photo of a {}",
                "an image of the {}",
                "a picture of a {}",
                "a snapshot of the {}",
                "a drawing of a {}",
                "a rendering of the {}",
                "a closeup of a {}",
                "a view of the {}",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    /// Parses the template interchange format: one template per line, each
    /// containing exactly one `{}` slot; blank lines are skipped.
    pub fn from_text(text: &str) -> Result<PromptTemplateSet, DataError> {
        let mut templates = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.matches("{}").count() != 1 {
                return Err(DataError::TemplateFormat(format!("need exactly one {{}} slot: {line:?}")));
            }
            templates.push(line.to_string());
        }
        if templates.is_empty() {
            return Err(DataError::TemplateFormat("no templates".into()));
        }
        Ok(PromptTemplateSet { templates })
    }

    pub fn to_text(&self) -> String {
        let mut out = self.templates.join("\n");
        out.push('\n');
        out
    }

    pub fn fill(&self, idx: usize, name: &str) -> String {
        self.templates[idx].replace("{}", name)
    }

    /// Every template instantiated for one class name.
    pub fn build_prompts(&self, name: &str) -> Vec<String> {
        (0..self.templates.len()).map(|i| self.fill(i, name)).collect()
    }
}

/// The whole word inventory: articles, template markers, caption grammar
/// words, class names and synonyms, in a fixed order.
pub fn full_lexicon(catalog: &ClassCatalog, templates: &PromptTemplateSet) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut push = |w: &str| {
        let w = w.to_lowercase();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    };
    for t in &templates.templates {
        for w in t.split_whitespace() {
            if w != "{}" {
                push(w);
            }
        }
    }
    for w in ATTRIBUTES.iter().chain(RELATIONS.iter()).chain(CONTEXTS.iter()) {
        push(w);
    }
    for c in &catalog.classes {
        push(&c.name);
        push(&c.synonym);
    }
    out
}

// ── rendering ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Labeled,
    Caption,
}

/// Visual regime of one render; this is the engineered domain gap.
#[derive(Debug, Clone, Copy)]
pub enum RenderStyle {
    /// Bright flat background, centered object, no clutter.
    Label,
    /// Darker background, off-center object, clutter dots.
    Caption,
}

fn draw_shape(canvas: &mut [f64], side: usize, shape: usize, cx: f64, cy: f64, s: f64, color: [f64; 3]) {
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f64 - cx) / s;
            let dy = (y as f64 - cy) / s;
            let inside = match shape {
                0 => dx * dx + dy * dy <= 1.0,
                1 => dx.abs() <= 0.85 && dy.abs() <= 0.85,
                2 => dy >= -0.9 && dy <= 0.9 && dx.abs() <= (0.9 - dy) * 0.6,
                3 => dx.abs() + dy.abs() <= 1.0,
                4 => {
                    let r = (dx * dx + dy * dy).sqrt();
                    (0.55..=1.0).contains(&r)
                }
                5 => (dx.abs() <= 0.3 || dy.abs() <= 0.3) && dx.abs() <= 1.0 && dy.abs() <= 1.0,
                6 => dx.abs() <= 1.0 && dy.abs() <= 0.9 && ((dx + 1.0) * 2.0) as i64 % 2 == 0,
                _ => {
                    dx.abs() <= 1.0
                        && dy.abs() <= 1.0
                        && (((dx + 1.0) * 2.0) as i64 + ((dy + 1.0) * 2.0) as i64) % 2 == 0
                }
            };
            if inside {
                let base = (y * side + x) * 3;
                canvas[base..base + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Renders one class instance in the given style; pure in `(args, stream)`.
pub fn render_class_image(
    icfg: &ImageEncoderConfig,
    catalog: &ClassCatalog,
    class_id: usize,
    style: RenderStyle,
    rng: &mut Rng,
) -> ImageSample {
    let side = icfg.side;
    let spec = catalog.class(class_id);
    let color = PALETTES[spec.palette];
    let bg = match style {
        RenderStyle::Label => rng.range_f64(0.80, 0.92),
        RenderStyle::Caption => rng.range_f64(0.22, 0.42),
    };
    let mut canvas = vec![0.0; side * side * 3];
    for px in canvas.chunks_exact_mut(3) {
        px[0] = bg;
        px[1] = bg;
        px[2] = bg * 0.97;
    }
    if let RenderStyle::Caption = style {
        // neutral clutter dots under the object; gray so they never mimic a
        // palette or a class shape
        let dots = 2 + rng.range_usize(3);
        for _ in 0..dots {
            let dx = rng.range_f64(1.0, side as f64 - 1.0);
            let dy = rng.range_f64(1.0, side as f64 - 1.0);
            let g = rng.range_f64(0.15, 0.35);
            draw_shape(&mut canvas, side, 0, dx, dy, rng.range_f64(0.5, 0.9), [g, g, g]);
        }
    }
    let (cx, cy, s) = match style {
        RenderStyle::Label => (
            7.5 + rng.range_f64(-1.0, 1.0),
            7.5 + rng.range_f64(-1.0, 1.0),
            4.5 + rng.range_f64(0.0, 1.5),
        ),
        RenderStyle::Caption => (
            5.5 + rng.range_f64(0.0, 5.0),
            5.5 + rng.range_f64(0.0, 5.0),
            4.0 + rng.range_f64(0.0, 2.0),
        ),
    };
    draw_shape(&mut canvas, side, spec.shape, cx, cy, s, color);
    for v in &mut canvas {
        *v = (*v + 0.02 * rng.normal()).clamp(0.0, 1.0);
    }
    ImageSample { pixels: canvas }
}

/// Caption grammar: article, palette attribute, class word or synonym,
/// relation, "the", context. Synonyms enter the corpus only here.
/// Share of seen-class captions phrased like a prompt template. Those
/// captions make the text surface ambiguous about its source: the same
/// sentence pairs with a clean render in the labeled stream and a cluttered
/// one here, so without the source prefix the template wording gets pulled
/// toward a compromise between the two image styles. Caption-only classes
/// never use template phrasing; their prompt-style evaluation stays a real
/// composition test.
pub const TEMPLATED_CAPTION_SHARE: f64 = 0.6;

pub fn make_caption(
    catalog: &ClassCatalog,
    templates: &PromptTemplateSet,
    class_id: usize,
    rng: &mut Rng,
) -> String {
    let spec = catalog.class(class_id);
    let name = if rng.range_usize(2) == 0 { spec.name.as_str() } else { spec.synonym.as_str() };
    if spec.seen && rng.uniform() < TEMPLATED_CAPTION_SHARE {
        return templates.fill(rng.range_usize(templates.templates.len()), name);
    }
    let article = if rng.uniform() < 0.5 { "a" } else { "the" };
    let relation = RELATIONS[rng.range_usize(RELATIONS.len())];
    let context = CONTEXTS[rng.range_usize(CONTEXTS.len())];
    format!("{article} {} {name} {relation} the {context}", spec.attribute())
}

// ── style shifts for evaluation ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    Noisy,
    Inverted,
    Sketch,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 3] = [ShiftKind::Noisy, ShiftKind::Inverted, ShiftKind::Sketch];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::Noisy => "noisy",
            ShiftKind::Inverted => "inverted",
            ShiftKind::Sketch => "sketch",
        }
    }
}

pub fn apply_shift(icfg: &ImageEncoderConfig, kind: ShiftKind, img: &ImageSample, rng: &mut Rng) -> ImageSample {
    let side = icfg.side;
    let mut out = img.pixels.clone();
    match kind {
        ShiftKind::Noisy => {
            for v in &mut out {
                *v = (*v + 0.15 * rng.normal()).clamp(0.0, 1.0);
            }
        }
        ShiftKind::Inverted => {
            for v in &mut out {
                *v = 1.0 - *v;
            }
        }
        ShiftKind::Sketch => {
            let lum = |p: &[f64], y: usize, x: usize| {
                let b = (y * side + x) * 3;
                (p[b] + p[b + 1] + p[b + 2]) / 3.0
            };
            let src = img.pixels.clone();
            for y in 0..side {
                for x in 0..side {
                    let here = lum(&src, y, x);
                    let right = if x + 1 < side { lum(&src, y, x + 1) } else { here };
                    let down = if y + 1 < side { lum(&src, y + 1, x) } else { here };
                    let edge = (right - here).abs() + (down - here).abs();
                    let v = if edge > 0.12 { 0.08 } else { 0.95 };
                    let b = (y * side + x) * 3;
                    out[b..b + 3].copy_from_slice(&[v, v, v]);
                }
            }
        }
    }
    ImageSample { pixels: out }
}

// ── dataset assembly ──

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    /// Generation seed; independent of the training seed so every model
    /// variant trains and evaluates on identical data.
    pub seed: u64,
    pub labeled_per_class: usize,
    pub caption_count: usize,
    pub eval_per_class: usize,
    pub caption_eval_per_class: usize,
    pub shift_per_class: usize,
    pub retrieval_pairs: usize,
    pub probe_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7777,
            labeled_per_class: 200,
            caption_count: 4000,
            eval_per_class: 20,
            caption_eval_per_class: 20,
            shift_per_class: 6,
            retrieval_pairs: 128,
            probe_per_class: 24,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.labeled_per_class == 0
            || self.caption_count == 0
            || self.shift_per_class == 0
            || self.retrieval_pairs == 0
            || self.probe_per_class == 0
        {
            return Err(DataError::EmptyConfig);
        }
        let floor = self.eval_per_class.min(self.caption_eval_per_class);
        if floor < MIN_EVAL_PER_CLASS {
            return Err(DataError::EvalSplitTooSmall(floor));
        }
        Ok(())
    }

    /// Total training samples across both sources.
    pub fn train_samples(&self) -> usize {
        SEEN_CLASSES * self.labeled_per_class + self.caption_count
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: ImageSample,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct CaptionSample {
    pub image: ImageSample,
    pub caption: String,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct EvalImage {
    pub image: ImageSample,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct TestSets {
    /// Label-style renders of seen classes.
    pub seen_clean: Vec<EvalImage>,
    /// Caption-style renders of the caption-only classes.
    pub caption_only: Vec<EvalImage>,
    /// Seen-class renders pushed through each style shift.
    pub shifted: Vec<(ShiftKind, Vec<EvalImage>)>,
    /// Held-out image-caption pairs for retrieval.
    pub retrieval: Vec<CaptionSample>,
    /// Label-style features for the linear probe.
    pub probe_train: Vec<EvalImage>,
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub labeled: Vec<LabeledSample>,
    pub captions: Vec<CaptionSample>,
    pub tests: TestSets,
    /// Content fingerprint over every pixel and caption, for manifests and
    /// determinism checks.
    pub content_hash: u64,
}

pub fn generate_datasets(
    cfg: &DataConfig,
    icfg: &ImageEncoderConfig,
    catalog: &ClassCatalog,
    templates: &PromptTemplateSet,
) -> Result<Datasets, DataError> {
    cfg.validate()?;
    let root = Rng::from_seed(cfg.seed);

    let mut labeled = Vec::with_capacity(SEEN_CLASSES * cfg.labeled_per_class);
    for class_id in catalog.seen_ids() {
        for i in 0..cfg.labeled_per_class {
            let mut rng = root.child(&format!("labeled/{class_id}/{i}"));
            let image = render_class_image(icfg, catalog, class_id, RenderStyle::Label, &mut rng);
            labeled.push(LabeledSample { image, class_id });
        }
    }

    let mut captions = Vec::with_capacity(cfg.caption_count);
    for i in 0..cfg.caption_count {
        let mut rng = root.child(&format!("caption/{i}"));
        let class_id = rng.range_usize(TOTAL_CLASSES);
        let image = render_class_image(icfg, catalog, class_id, RenderStyle::Caption, &mut rng);
        let caption = make_caption(catalog, templates, class_id, &mut rng);
        captions.push(CaptionSample { image, caption, class_id });
    }

    let mut seen_clean = Vec::new();
    for class_id in catalog.seen_ids() {
        for i in 0..cfg.eval_per_class {
            let mut rng = root.child(&format!("test/seen/{class_id}/{i}"));
            let image = render_class_image(icfg, catalog, class_id, RenderStyle::Label, &mut rng);
            seen_clean.push(EvalImage { image, class_id });
        }
    }

    let mut caption_only = Vec::new();
    for class_id in catalog.caption_only_ids() {
        for i in 0..cfg.caption_eval_per_class {
            let mut rng = root.child(&format!("test/captiononly/{class_id}/{i}"));
            let image = render_class_image(icfg, catalog, class_id, RenderStyle::Caption, &mut rng);
            caption_only.push(EvalImage { image, class_id });
        }
    }

    let mut shifted = Vec::new();
    for kind in ShiftKind::ALL {
        let mut set = Vec::new();
        for class_id in catalog.seen_ids() {
            for i in 0..cfg.shift_per_class {
                let name = kind.as_str();
                let mut rng = root.child(&format!("test/shift/{name}/{class_id}/{i}"));
                let base = render_class_image(icfg, catalog, class_id, RenderStyle::Label, &mut rng);
                let image = apply_shift(icfg, kind, &base, &mut rng);
                set.push(EvalImage { image, class_id });
            }
        }
        shifted.push((kind, set));
    }

    let mut retrieval = Vec::with_capacity(cfg.retrieval_pairs);
    for i in 0..cfg.retrieval_pairs {
        let mut rng = root.child(&format!("test/retrieval/{i}"));
        let class_id = rng.range_usize(TOTAL_CLASSES);
        let image = render_class_image(icfg, catalog, class_id, RenderStyle::Caption, &mut rng);
        let caption = make_caption(catalog, templates, class_id, &mut rng);
        retrieval.push(CaptionSample { image, caption, class_id });
    }

    let mut probe_train = Vec::new();
    for class_id in catalog.seen_ids() {
        for i in 0..cfg.probe_per_class {
            let mut rng = root.child(&format!("test/probe/{class_id}/{i}"));
            let image = render_class_image(icfg, catalog, class_id, RenderStyle::Label, &mut rng);
            probe_train.push(EvalImage { image, class_id });
        }
    }

    let tests = TestSets { seen_clean, caption_only, shifted, retrieval, probe_train };
    let content_hash = hash_datasets(&labeled, &captions, &tests);
    Ok(Datasets { labeled, captions, tests, content_hash })
}

fn hash_datasets(labeled: &[LabeledSample], captions: &[CaptionSample], tests: &TestSets) -> u64 {
    let mut h = Hasher::new();
    for s in labeled {
        h.pixels(&s.image);
        h.usize(s.class_id);
    }
    for s in captions {
        h.pixels(&s.image);
        h.str(&s.caption);
        h.usize(s.class_id);
    }
    for s in &tests.seen_clean {
        h.pixels(&s.image);
        h.usize(s.class_id);
    }
    for s in &tests.caption_only {
        h.pixels(&s.image);
        h.usize(s.class_id);
    }
    for (kind, set) in &tests.shifted {
        h.str(kind.as_str());
        for s in set {
            h.pixels(&s.image);
            h.usize(s.class_id);
        }
    }
    for s in &tests.retrieval {
        h.pixels(&s.image);
        h.str(&s.caption);
        h.usize(s.class_id);
    }
    for s in &tests.probe_train {
        h.pixels(&s.image);
        h.usize(s.class_id);
    }
    h.finish()
}

/// FNV-1a over raw little-endian bytes.
struct Hasher(u64);

impl Hasher {
    fn new() -> Hasher {
        Hasher(0xcbf2_9ce4_8422_2325)
    }

    fn bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn pixels(&mut self, img: &ImageSample) {
        for v in &img.pixels {
            self.bytes(&v.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
        self.bytes(&[0xff]);
    }

    fn usize(&mut self, v: usize) {
        self.bytes(&(v as u64).to_le_bytes());
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

// ── image set dump/load ──

/// Writes `{name}.bin` (a `[n, side, side, chans]` tensor file) and a
/// `{name}.csv` manifest of `index,class_id` rows.
pub fn dump_image_set(
    dir: &std::path::Path,
    name: &str,
    icfg: &ImageEncoderConfig,
    images: &[EvalImage],
) -> Result<(), DataError> {
    if images.is_empty() {
        return Err(DataError::DumpFormat("empty image set".into()));
    }
    let mut data = Vec::with_capacity(images.len() * icfg.pixel_count());
    let mut manifest = String::from("index,class_id\n");
    for (i, img) in images.iter().enumerate() {
        data.extend_from_slice(&img.image.pixels);
        manifest.push_str(&format!("{i},{}\n", img.class_id));
    }
    let dims = [images.len(), icfg.side, icfg.side, icfg.chans];
    crate::image::write_tensor_file(&dir.join(format!("{name}.bin")), &dims, &data)?;
    std::fs::write(dir.join(format!("{name}.csv")), manifest)?;
    Ok(())
}

pub fn load_image_set(
    dir: &std::path::Path,
    name: &str,
    icfg: &ImageEncoderConfig,
) -> Result<Vec<EvalImage>, DataError> {
    let bad = |msg: String| DataError::DumpFormat(msg);
    let (dims, data) = crate::image::read_tensor_file(&dir.join(format!("{name}.bin")))?;
    if dims.len() != 4 || dims[1] != icfg.side || dims[2] != icfg.side || dims[3] != icfg.chans {
        return Err(bad(format!("dims {dims:?} do not fit the image config")));
    }
    let manifest = std::fs::read_to_string(dir.join(format!("{name}.csv")))?;
    let mut lines = manifest.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some("index,class_id") {
        return Err(bad("bad manifest header".into()));
    }
    let mut out = Vec::with_capacity(dims[0]);
    for (i, line) in lines.enumerate() {
        let (idx, class_id) = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
            .ok_or_else(|| bad(format!("bad manifest row {line:?}")))?;
        if idx != i {
            return Err(bad(format!("manifest rows must be in order, got {idx} at {i}")));
        }
        let px = icfg.pixel_count();
        let pixels = data
            .get(i * px..(i + 1) * px)
            .ok_or_else(|| bad("manifest lists more images than the tensor holds".into()))?;
        let image = ImageSample::new(icfg, pixels.to_vec())
            .map_err(|e| bad(format!("image {i}: {e}")))?;
        out.push(EvalImage { image, class_id });
    }
    if out.len() != dims[0] {
        return Err(bad(format!("tensor holds {} images, manifest lists {}", dims[0], out.len())));
    }
    Ok(out)
}

// ── batch sampling ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Every batch drawn wholly from one source, chosen per batch.
    Ds,
    /// Each slot draws its source independently.
    Es,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    pub batch_size: usize,
    /// Per-slot probability that an ES draw comes from the labeled source.
    /// DS ignores it and picks each batch's source uniformly.
    pub source_ratio: f64,
    /// Overrides the stream derived from the training seed when set.
    pub seed: Option<u64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { strategy: SamplingStrategy::Ds, batch_size: 32, source_ratio: 0.5, seed: None }
    }
}

/// One training example as the trainer consumes it.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: ImageSample,
    pub text: String,
    pub source: Source,
    /// Class id for labeled draws; a fresh unique id for caption draws, so
    /// caption pairs are their own only positives.
    pub label: u64,
}

const CAPTION_LABEL_BASE: u64 = 1 << 32;

/// One sampled batch plus its metadata.
#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// Set when a source's pool was smaller than the slots asked of it, so
    /// that source was drawn with replacement this batch.
    pub replacement_fallback: bool,
}

/// `k` pool indices in draw order, distinct unless `k` exceeds the pool.
fn draw_indices(rng: &mut Rng, pool: usize, k: usize) -> (Vec<usize>, bool) {
    if k > pool {
        return ((0..k).map(|_| rng.range_usize(pool)).collect(), true);
    }
    let mut used = vec![false; pool];
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.range_usize(pool);
        if !used[i] {
            used[i] = true;
            out.push(i);
        }
    }
    (out, false)
}

pub struct BatchSampler<'a> {
    data: &'a Datasets,
    templates: &'a PromptTemplateSet,
    catalog: &'a ClassCatalog,
    cfg: SamplerConfig,
    rng: Rng,
    caption_counter: u64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        data: &'a Datasets,
        templates: &'a PromptTemplateSet,
        catalog: &'a ClassCatalog,
        cfg: SamplerConfig,
        rng: Rng,
    ) -> Result<BatchSampler<'a>, DataError> {
        if cfg.batch_size < 2 {
            return Err(DataError::BatchTooSmall(cfg.batch_size));
        }
        if !(cfg.source_ratio > 0.0 && cfg.source_ratio < 1.0) {
            return Err(DataError::BadSourceRatio(cfg.source_ratio));
        }
        if data.labeled.is_empty() {
            return Err(DataError::EmptySource("labeled"));
        }
        if data.captions.is_empty() {
            return Err(DataError::EmptySource("caption"));
        }
        Ok(BatchSampler { data, templates, catalog, cfg, rng, caption_counter: 0 })
    }

    /// Stream position and draw counter, persisted by checkpoints.
    pub fn state(&self) -> (u128, u64) {
        (self.rng.word_pos(), self.caption_counter)
    }

    pub fn restore(&mut self, word_pos: u128, caption_counter: u64) {
        self.rng.set_word_pos(word_pos);
        self.caption_counter = caption_counter;
    }

    fn item_at(&mut self, source: Source, index: usize) -> BatchItem {
        match source {
            Source::Labeled => {
                let s = &self.data.labeled[index];
                let t = self.rng.range_usize(self.templates.templates.len());
                let name = &self.catalog.class(s.class_id).name;
                BatchItem {
                    image: s.image.clone(),
                    text: self.templates.fill(t, name),
                    source: Source::Labeled,
                    label: s.class_id as u64,
                }
            }
            Source::Caption => {
                let s = &self.data.captions[index];
                self.caption_counter += 1;
                BatchItem {
                    image: s.image.clone(),
                    text: s.caption.clone(),
                    source: Source::Caption,
                    label: CAPTION_LABEL_BASE + self.caption_counter,
                }
            }
        }
    }

    fn pool(&self, source: Source) -> usize {
        match source {
            Source::Labeled => self.data.labeled.len(),
            Source::Caption => self.data.captions.len(),
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let b = self.cfg.batch_size;
        match self.cfg.strategy {
            SamplingStrategy::Ds => {
                let source = if self.rng.uniform() < 0.5 { Source::Labeled } else { Source::Caption };
                let pool = self.pool(source);
                let (idx, fallback) = draw_indices(&mut self.rng, pool, b);
                let items = idx.into_iter().map(|i| self.item_at(source, i)).collect();
                Batch { items, replacement_fallback: fallback }
            }
            SamplingStrategy::Es => {
                let slots: Vec<Source> = (0..b)
                    .map(|_| {
                        if self.rng.uniform() < self.cfg.source_ratio {
                            Source::Labeled
                        } else {
                            Source::Caption
                        }
                    })
                    .collect();
                let want = |src: Source| slots.iter().filter(|&&s| s == src).count();
                let (n_lab, n_cap) = (self.pool(Source::Labeled), self.pool(Source::Caption));
                let (mut lab, fb_l) = draw_indices(&mut self.rng, n_lab, want(Source::Labeled));
                let (mut cap, fb_c) = draw_indices(&mut self.rng, n_cap, want(Source::Caption));
                lab.reverse();
                cap.reverse();
                let items = slots
                    .into_iter()
                    .map(|src| {
                        let i = match src {
                            Source::Labeled => lab.pop().expect("one index per slot"),
                            Source::Caption => cap.pop().expect("one index per slot"),
                        };
                        self.item_at(src, i)
                    })
                    .collect();
                Batch { items, replacement_fallback: fb_l || fb_c }
            }
        }
    }
}

/// Step budget for a run: `ceil(N / batch) * 2 * epochs`.
pub fn planned_iterations(total_samples: u64, batch_size: u64, epochs: u64) -> u64 {
    assert!(batch_size > 0, "batch_size must be positive");
    total_samples.div_ceil(batch_size) * 2 * epochs
}
