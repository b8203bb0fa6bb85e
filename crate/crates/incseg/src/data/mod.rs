//! Deterministic synthetic multi-domain segmentation data: small images
//! of geometric shapes over textured backgrounds, with per-domain
//! palettes, partially overlapping class subsets, and portable PPM/PGM
//! dataset I/O. Every sample is a pure function of (spec seed, index).

pub mod pnm;

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::rng::RngState;
use crate::IGNORE_INDEX;

pub const BACKGROUND: &str = "background";

/// Ordered class list; a class's id is its position. Id 255 is reserved
/// as the ignore index and never names a class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("label space needs at least one class".into()));
        }
        if names.len() > 254 {
            return Err(Error::InvalidArgument(format!(
                "{} classes exceed the 254 ids below the ignore index",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::InvalidArgument("empty class name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidArgument(format!("duplicate class name `{n}`")));
            }
        }
        Ok(LabelSpace { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    /// Number of class names two spaces have in common.
    pub fn overlap(&self, other: &LabelSpace) -> usize {
        self.names.iter().filter(|n| other.names.contains(n)).count()
    }
}

/// The global shape universe: five shapes shared by every default domain
/// plus three domain-exclusive ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
    Ring,
    Cross,
    Stripes,
    Diamond,
    Checker,
}

impl ShapeKind {
    pub const UNIVERSE: [ShapeKind; 8] = [
        ShapeKind::Rectangle,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Stripes,
        ShapeKind::Diamond,
        ShapeKind::Checker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Stripes => "stripes",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Checker => "checker",
        }
    }
}

/// Pixel membership for a shape instance centered at (cx, cy) with size
/// parameter r, on integer image coordinates.
pub(crate) fn shape_mask(kind: ShapeKind, cx: i64, cy: i64, r: i64, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let (dx, dy) = (x - cx, y - cy);
            let inside = match kind {
                ShapeKind::Rectangle => dx.abs() <= r && dy.abs() <= (r * 2) / 3,
                ShapeKind::Disk => dx * dx + dy * dy <= r * r,
                ShapeKind::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
                ShapeKind::Ring => {
                    let d2 = dx * dx + dy * dy;
                    let inner = r / 2;
                    d2 <= r * r && d2 >= inner * inner
                }
                ShapeKind::Cross => {
                    let arm = (2 * r / 5).max(1);
                    (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
                }
                ShapeKind::Stripes => dx.abs() <= r && dy.abs() <= r && (dx + dy).rem_euclid(4) < 2,
                ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
                ShapeKind::Checker => {
                    dx.abs() <= r && dy.abs() <= r && (dx.div_euclid(2) + dy.div_euclid(2)).rem_euclid(2) == 0
                }
            };
            if inside {
                mask[(y * width as i64 + x) as usize] = true;
            }
        }
    }
    mask
}

/// Generator recipe for one domain. The induced label space is
/// `background` (id 0) followed by the shape subset in listed order.
#[derive(Clone, Debug)]
pub struct DomainGenSpec {
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Nonempty, duplicate-free class subset of the shape universe.
    pub shapes: Vec<ShapeKind>,
    /// Base RGB color per entry of `shapes`, components in [0, 1].
    pub palette: Vec<[f64; 3]>,
    /// Std of the per-instance color offset.
    pub color_jitter: f64,
    pub background_color: [f64; 3],
    /// Background texture: sine product with this many periods across the
    /// image, scaled by `texture_amp`.
    pub texture_freq: f64,
    pub texture_amp: f64,
    /// Std of the per-pixel additive noise.
    pub noise_sigma: f64,
    /// Shapes per image.
    pub density: usize,
}

impl DomainGenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::InvalidArgument(format!(
                "domain name `{}` must be nonempty [A-Za-z0-9_-]",
                self.name
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument("image extents must be at least 8".into()));
        }
        if self.train_count == 0 || self.val_count == 0 {
            return Err(Error::InvalidArgument("train and val counts must be positive".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::InvalidArgument("class subset must be nonempty".into()));
        }
        let unique: BTreeSet<&str> = self.shapes.iter().map(|s| s.name()).collect();
        if unique.len() != self.shapes.len() {
            return Err(Error::InvalidArgument("class subset contains duplicates".into()));
        }
        if self.palette.len() != self.shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "palette has {} colors for {} classes",
                self.palette.len(),
                self.shapes.len()
            )));
        }
        if self.density == 0 {
            return Err(Error::InvalidArgument("density must be at least 1".into()));
        }
        if self.noise_sigma < 0.0 || self.color_jitter < 0.0 || self.texture_amp < 0.0 {
            return Err(Error::InvalidArgument("noise, jitter and texture amplitudes must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.train_count + self.val_count
    }

    /// Label space induced by the subset: background first, then shapes.
    pub fn label_space(&self) -> LabelSpace {
        let mut names = vec![BACKGROUND.to_string()];
        names.extend(self.shapes.iter().map(|s| s.name().to_string()));
        LabelSpace::new(names).expect("validated subset")
    }

    fn size_range(&self) -> (i64, i64) {
        let m = self.height.min(self.width) as i64;
        ((m / 8).max(2), (m / 5).max(3))
    }
}

/// One rendered sample: channel-major RGB in [0, 1] plus a label map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: LabelSpace,
    pub height: usize,
    pub width: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub(crate) struct Placement {
    pub class_id: u8,
    pub kind: ShapeKind,
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
}

const PLACEMENT_ATTEMPTS: usize = 120;

fn boxes_overlap(a: (i64, i64, i64), b: (i64, i64, i64)) -> bool {
    let (ax, ay, ar) = a;
    let (bx, by, br) = b;
    (ax - bx).abs() <= ar + br && (ay - by).abs() <= ar + br
}

pub(crate) fn render_sample_traced(spec: &DomainGenSpec, index: usize) -> Result<(Sample, Vec<Placement>)> {
    spec.validate()?;
    if index >= spec.sample_count() {
        return Err(Error::InvalidArgument(format!(
            "sample index {index} out of range for {} samples",
            spec.sample_count()
        )));
    }
    let mut rng = RngState::new(spec.seed).substream(index as u64);
    let (h, w) = (spec.height, spec.width);

    // Textured background.
    let phase_x = rng.uniform(0.0, TAU);
    let phase_y = rng.uniform(0.0, TAU);
    let mut image = vec![0.0f32; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let tex = spec.texture_amp
                * (TAU * spec.texture_freq * x as f64 / w as f64 + phase_x).sin()
                * (TAU * spec.texture_freq * y as f64 / h as f64 + phase_y).cos();
            for c in 0..3 {
                image[(c * h + y) * w + x] = (spec.background_color[c] + tex).clamp(0.0, 1.0) as f32;
            }
        }
    }

    // Shapes with non-overlapping bounding boxes, so no instance ever
    // occludes another.
    let (rlo, rhi) = spec.size_range();
    let mut placements: Vec<Placement> = Vec::with_capacity(spec.density);
    for i in 0..spec.density {
        let class_pos = rng.below(spec.shapes.len());
        let kind = spec.shapes[class_pos];
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rlo + rng.below((rhi - rlo + 1) as usize) as i64;
            if 2 * r + 1 > w as i64 || 2 * r + 1 > h as i64 {
                continue;
            }
            let cx = r + rng.below(w - 2 * r as usize) as i64;
            let cy = r + rng.below(h - 2 * r as usize) as i64;
            if placements.iter().any(|p| boxes_overlap((p.cx, p.cy, p.r), (cx, cy, r))) {
                continue;
            }
            placements.push(Placement { class_id: (class_pos + 1) as u8, kind, cx, cy, r });
            placed = true;
            break;
        }
        if !placed {
            // Rejection sampling can stall on a crowded canvas even when room
            // remains; fall back to a coarse grid of anchors at the minimum
            // radius before declaring the spec infeasible.
            let r = rlo;
            'grid: for gy in 0..3i64 {
                for gx in 0..3i64 {
                    let cx = r + (w as i64 - 1 - 2 * r) * gx / 2;
                    let cy = r + (h as i64 - 1 - 2 * r) * gy / 2;
                    if placements.iter().any(|p| boxes_overlap((p.cx, p.cy, p.r), (cx, cy, r))) {
                        continue;
                    }
                    placements.push(Placement { class_id: (class_pos + 1) as u8, kind, cx, cy, r });
                    placed = true;
                    break 'grid;
                }
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "cannot place shape {} of {} on a {w}x{h} canvas; density too high",
                i + 1,
                spec.density
            )));
        }
        let p = placements.last().unwrap();
        let base = spec.palette[class_pos];
        let color = [
            (base[0] + spec.color_jitter * rng.normal(0.0, 1.0)).clamp(0.0, 1.0) as f32,
            (base[1] + spec.color_jitter * rng.normal(0.0, 1.0)).clamp(0.0, 1.0) as f32,
            (base[2] + spec.color_jitter * rng.normal(0.0, 1.0)).clamp(0.0, 1.0) as f32,
        ];
        let mask = shape_mask(p.kind, p.cx, p.cy, p.r, h, w);
        for (pix, &inside) in mask.iter().enumerate() {
            if inside {
                labels[pix] = p.class_id;
                for c in 0..3 {
                    image[c * h * w + pix] = color[c];
                }
            }
        }
    }

    // Per-pixel noise.
    if spec.noise_sigma > 0.0 {
        let mut noise = vec![0.0f32; image.len()];
        rng.fill_normal(&mut noise, spec.noise_sigma);
        for (v, n) in image.iter_mut().zip(noise) {
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }

    if !labels.contains(&0) {
        return Err(Error::Data("shapes covered the entire background".into()));
    }
    Ok((Sample { image, labels, height: h, width: w }, placements))
}

/// Render one sample; depends only on (spec.seed, index).
pub fn render_sample(spec: &DomainGenSpec, index: usize) -> Result<Sample> {
    render_sample_traced(spec, index).map(|(s, _)| s)
}

/// Render the full dataset: indices 0..train_count are the train split,
/// the rest the val split.
pub fn generate_domain(spec: &DomainGenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.train_count);
    let mut val = Vec::with_capacity(spec.val_count);
    for i in 0..spec.sample_count() {
        let s = render_sample(spec, i)?;
        if i < spec.train_count {
            train.push(s);
        } else {
            val.push(s);
        }
    }
    Ok(Dataset { classes: spec.label_space(), height: spec.height, width: spec.width, train, val })
}

/// The stock three-domain experiment: shared shapes {rectangle, disk,
/// triangle, ring, cross} everywhere plus one exclusive shape per domain,
/// with distinct palettes, backgrounds and textures as the domain shift.
pub fn default_domain_specs(base_seed: u64) -> Vec<DomainGenSpec> {
    let shared = [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Triangle, ShapeKind::Ring, ShapeKind::Cross];
    let mk = |name: &str,
              offset: u64,
              exclusive: ShapeKind,
              palette: [[f64; 3]; 6],
              background: [f64; 3],
              freq: f64|
     -> DomainGenSpec {
        let mut shapes = shared.to_vec();
        shapes.push(exclusive);
        DomainGenSpec {
            name: name.to_string(),
            seed: base_seed.wrapping_mul(1000).wrapping_add(offset),
            height: 64,
            width: 64,
            train_count: 200,
            val_count: 50,
            shapes,
            palette: palette.to_vec(),
            color_jitter: 0.03,
            background_color: background,
            texture_freq: freq,
            texture_amp: 0.06,
            noise_sigma: 0.02,
            density: 3,
        }
    };
    vec![
        mk(
            "alpha",
            1,
            ShapeKind::Stripes,
            [
                [0.85, 0.25, 0.20],
                [0.90, 0.55, 0.15],
                [0.95, 0.80, 0.25],
                [0.80, 0.35, 0.45],
                [0.75, 0.60, 0.30],
                [0.90, 0.40, 0.60],
            ],
            [0.15, 0.18, 0.25],
            3.0,
        ),
        mk(
            "beta",
            2,
            ShapeKind::Diamond,
            [
                [0.20, 0.45, 0.85],
                [0.15, 0.65, 0.80],
                [0.30, 0.30, 0.90],
                [0.25, 0.55, 0.65],
                [0.40, 0.40, 0.75],
                [0.20, 0.70, 0.95],
            ],
            [0.30, 0.25, 0.12],
            5.0,
        ),
        mk(
            "gamma",
            3,
            ShapeKind::Checker,
            [
                [0.25, 0.75, 0.30],
                [0.45, 0.85, 0.25],
                [0.20, 0.60, 0.45],
                [0.55, 0.70, 0.20],
                [0.35, 0.90, 0.50],
                [0.60, 0.80, 0.40],
            ],
            [0.10, 0.22, 0.14],
            7.0,
        ),
    ]
}

/// Check a set of specs jointly: names unique, and any shape that is not
/// in every subset appears in exactly one (exclusive classes belong to a
/// single domain).
pub fn validate_spec_set(specs: &[DomainGenSpec]) -> Result<()> {
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if specs[..i].iter().any(|s| s.name == spec.name) {
            return Err(Error::DuplicateDomain(spec.name.clone()));
        }
    }
    for kind in ShapeKind::UNIVERSE {
        let holders = specs.iter().filter(|s| s.shapes.contains(&kind)).count();
        if holders != 0 && holders != specs.len() && holders != 1 {
            return Err(Error::InvalidArgument(format!(
                "shape `{}` appears in {holders} of {} domains; must be shared by all or exclusive to one",
                kind.name(),
                specs.len()
            )));
        }
    }
    Ok(())
}

/// Directory a domain's dataset lives in under a data root.
pub fn domain_dir(root: &Path, domain_name: &str) -> PathBuf {
    root.join(format!("domain_{domain_name}"))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `root/domain_<name>/{train,val}/img_%05d.ppm` + `lbl_%05d.pgm`
/// and a `labels.txt` with one class name per line (line number = id).
pub fn write_dataset(ds: &Dataset, root: &Path, domain_name: &str) -> Result<()> {
    let dir = domain_dir(root, domain_name);
    for split in [Split::Train, Split::Val] {
        let split_dir = dir.join(split.dir_name());
        std::fs::create_dir_all(&split_dir)?;
        for (i, s) in ds.samples(split).iter().enumerate() {
            let (h, w) = (s.height, s.width);
            let mut rgb = vec![0u8; h * w * 3];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        rgb[(y * w + x) * 3 + c] = quantize(s.image[(c * h + y) * w + x]);
                    }
                }
            }
            pnm::write_ppm(&split_dir.join(format!("img_{i:05}.ppm")), w, h, &rgb)?;
            pnm::write_pgm(&split_dir.join(format!("lbl_{i:05}.pgm")), w, h, &s.labels)?;
        }
    }
    std::fs::write(dir.join("labels.txt"), ds.classes.names().join("\n") + "\n")?;
    Ok(())
}

fn load_split(split_dir: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for i in 0.. {
        let img_path = split_dir.join(format!("img_{i:05}.ppm"));
        let lbl_path = split_dir.join(format!("lbl_{i:05}.pgm"));
        if !img_path.exists() {
            if lbl_path.exists() {
                return Err(Error::Data(format!("{} has no matching image", lbl_path.display())));
            }
            break;
        }
        let (w, h, rgb) = pnm::read_ppm(&img_path)?;
        let (lw, lh, labels) = pnm::read_pgm(&lbl_path)?;
        if (w, h) != (lw, lh) {
            return Err(Error::Data(format!(
                "{}: image is {w}x{h} but labels are {lw}x{lh}",
                img_path.display()
            )));
        }
        if let Some(&bad) =
            labels.iter().find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes)
        {
            return Err(Error::Data(format!(
                "{}: label value {bad} outside the {num_classes}-class space",
                lbl_path.display()
            )));
        }
        let mut image = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    image[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] as f32 / 255.0;
                }
            }
        }
        samples.push(Sample { image, labels, height: h, width: w });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples found", split_dir.display())));
    }
    let (h, w) = (samples[0].height, samples[0].width);
    if samples.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::Data(format!("{}: mixed image sizes", split_dir.display())));
    }
    Ok(samples)
}

pub fn load_dataset(root: &Path, domain_name: &str) -> Result<Dataset> {
    let dir = domain_dir(root, domain_name);
    let labels_path = dir.join("labels.txt");
    if !labels_path.exists() {
        return Err(Error::Data(format!("missing {}", labels_path.display())));
    }
    let text = std::fs::read_to_string(&labels_path)?;
    let classes = LabelSpace::new(text.lines().map(|l| l.to_string()).collect())?;
    let train = load_split(&dir.join(Split::Train.dir_name()), classes.len())?;
    let val = load_split(&dir.join(Split::Val.dir_name()), classes.len())?;
    if train[0].height != val[0].height || train[0].width != val[0].width {
        return Err(Error::Data("train and val image sizes differ".into()));
    }
    Ok(Dataset { classes, height: train[0].height, width: train[0].width, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_spec() -> DomainGenSpec {
        DomainGenSpec {
            name: "tiny".into(),
            seed: 11,
            height: 32,
            width: 32,
            train_count: 4,
            val_count: 2,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Diamond],
            palette: vec![[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9]],
            color_jitter: 0.02,
            background_color: [0.2, 0.2, 0.25],
            texture_freq: 3.0,
            texture_amp: 0.05,
            noise_sigma: 0.01,
            density: 2,
        }
    }

    fn image_bits(s: &Sample) -> Vec<u32> {
        s.image.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn same_spec_generates_bitwise_identical_datasets() {
        let spec = tiny_spec();
        let a = generate_domain(&spec).unwrap();
        let b = generate_domain(&spec).unwrap();
        assert_eq!(a.train.len(), 4);
        assert_eq!(a.val.len(), 2);
        for (x, y) in a.train.iter().chain(&a.val).zip(b.train.iter().chain(&b.val)) {
            assert_eq!(image_bits(x), image_bits(y));
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn random_access_matches_sequential_generation() {
        let spec = tiny_spec();
        let ds = generate_domain(&spec).unwrap();
        let direct = render_sample(&spec, 5).unwrap();
        assert_eq!(image_bits(&direct), image_bits(&ds.val[1]), "index 5 is the 6th sample overall");
        assert_eq!(direct.labels, ds.val[1].labels);

        let a = render_sample(&spec, 0).unwrap();
        let b = render_sample(&spec, 1).unwrap();
        assert_ne!(image_bits(&a), image_bits(&b), "distinct indices use distinct substreams");

        assert!(render_sample(&spec, 6).is_err());
    }

    #[test]
    fn labels_use_only_the_declared_subset_and_contain_background() {
        let spec = tiny_spec();
        let ds = generate_domain(&spec).unwrap();
        for s in ds.train.iter().chain(&ds.val) {
            let mut seen = [false; 256];
            for &l in &s.labels {
                seen[l as usize] = true;
            }
            assert!(seen[0], "background missing");
            assert!(seen.iter().skip(1).take(3).any(|&b| b), "no foreground class present");
            for (id, &b) in seen.iter().enumerate() {
                assert!(!b || id <= 3, "label {id} outside the declared space");
            }
        }
    }

    #[test]
    fn impossible_density_is_rejected() {
        let spec = DomainGenSpec { density: 500, ..tiny_spec() };
        let err = generate_domain(&spec).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn hand_checked_masks_on_an_8x8_grid() {
        // Rectangle r=3 at (3,4): |dx|<=3 and |dy|<=2.
        let rect = shape_mask(ShapeKind::Rectangle, 3, 4, 3, 8, 8);
        let mut expect = vec![false; 64];
        for y in 2..=6 {
            for x in 0..=6 {
                expect[y * 8 + x] = true;
            }
        }
        assert_eq!(rect, expect);

        // Diamond r=2 at (4,3): Manhattan ball.
        let diamond = shape_mask(ShapeKind::Diamond, 4, 3, 2, 8, 8);
        let mut expect = vec![false; 64];
        for (y, x) in [
            (1, 4),
            (2, 3),
            (2, 4),
            (2, 5),
            (3, 2),
            (3, 3),
            (3, 4),
            (3, 5),
            (3, 6),
            (4, 3),
            (4, 4),
            (4, 5),
            (5, 4),
        ] {
            expect[y * 8 + x] = true;
        }
        assert_eq!(diamond, expect);

        // Disk r=2 at (4,4): x^2+y^2 <= 4 keeps offsets (0,0),(±1,0),(0,±1),
        // (±1,±1),(±2,0),(0,±2).
        let disk = shape_mask(ShapeKind::Disk, 4, 4, 2, 8, 8);
        let mut expect = vec![false; 64];
        for (dy, dx) in [
            (0i64, 0i64),
            (0, 1),
            (0, -1),
            (1, 0),
            (-1, 0),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
            (0, 2),
            (0, -2),
            (2, 0),
            (-2, 0),
        ] {
            expect[((4 + dy) * 8 + 4 + dx) as usize] = true;
        }
        assert_eq!(disk, expect);

        // Cross r=3, arm=1 at (4,4).
        let cross = shape_mask(ShapeKind::Cross, 4, 4, 3, 8, 8);
        let mut expect = vec![false; 64];
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                if dx.abs() <= 1 || dy.abs() <= 1 {
                    expect[((4 + dy) * 8 + 4 + dx) as usize] = true;
                }
            }
        }
        assert_eq!(cross, expect);
    }

    #[test]
    fn rendered_labels_match_placement_geometry() {
        let spec = tiny_spec();
        for index in 0..spec.sample_count() {
            let (sample, placements) = render_sample_traced(&spec, index).unwrap();
            let mut expect = vec![0u8; 32 * 32];
            for p in &placements {
                let mask = shape_mask(p.kind, p.cx, p.cy, p.r, 32, 32);
                for (pix, &inside) in mask.iter().enumerate() {
                    if inside {
                        assert_eq!(expect[pix], 0, "placements must not overlap");
                        expect[pix] = p.class_id;
                    }
                }
            }
            assert_eq!(sample.labels, expect);
        }
    }

    #[test]
    fn disjoint_palettes_shift_channel_means_beyond_noise() {
        let specs = default_domain_specs(5);
        let mut means = Vec::new();
        for spec in &specs[..2] {
            let mut sum = [0.0f64; 3];
            let mut count = 0usize;
            for i in 0..100 {
                let s = render_sample(spec, i).unwrap();
                let hw = s.height * s.width;
                for c in 0..3 {
                    sum[c] += s.image[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
                }
                count += hw;
            }
            means.push([sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64]);
        }
        let max_gap = (0..3).map(|c| (means[0][c] - means[1][c]).abs()).fold(0.0, f64::max);
        assert!(
            max_gap > specs[0].noise_sigma,
            "domain shift {max_gap} is below the noise floor {}",
            specs[0].noise_sigma
        );
    }

    #[test]
    fn default_specs_are_coherent() {
        let specs = default_domain_specs(1);
        validate_spec_set(&specs).unwrap();
        assert_eq!(specs.len(), 3);
        for spec in &specs {
            assert_eq!((spec.height, spec.width), (64, 64));
            assert_eq!((spec.train_count, spec.val_count), (200, 50));
            assert_eq!(spec.label_space().len(), 7);
        }
        // Shared shapes overlap: 5 shapes + background.
        let (a, b) = (specs[0].label_space(), specs[1].label_space());
        assert_eq!(a.overlap(&b), 6);

        // Exclusive shape in more than one domain is rejected.
        let mut bad = default_domain_specs(1);
        bad[1].shapes.pop();
        bad[1].shapes.push(ShapeKind::Stripes);
        bad[1].palette.rotate_left(1);
        assert!(validate_spec_set(&bad).is_err());
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let spec = tiny_spec();
        let ds = generate_domain(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), &spec.name).unwrap();
        let loaded = load_dataset(dir.path(), &spec.name).unwrap();

        assert_eq!(loaded.classes, ds.classes);
        assert_eq!(loaded.train.len(), ds.train.len());
        assert_eq!(loaded.val.len(), ds.val.len());
        for (a, b) in ds.train.iter().chain(&ds.val).zip(loaded.train.iter().chain(&loaded.val)) {
            assert_eq!(a.labels, b.labels, "labels roundtrip exactly");
            for (x, y) in a.image.iter().zip(&b.image) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6, "{x} vs {y} beyond quantization");
            }
        }

        // Loading an unknown domain fails on the missing labels.txt.
        let err = load_dataset(dir.path(), "nope").unwrap_err();
        assert!(err.to_string().contains("labels.txt"), "{err}");
    }

    #[test]
    fn out_of_range_label_values_are_rejected_on_load() {
        let spec = tiny_spec();
        let ds = generate_domain(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), &spec.name).unwrap();
        let victim = dir.path().join("domain_tiny/train/lbl_00001.pgm");
        let (w, h, mut labels) = pnm::read_pgm(&victim).unwrap();
        labels[0] = 200;
        pnm::write_pgm(&victim, w, h, &labels).unwrap();
        let err = load_dataset(dir.path(), &spec.name).unwrap_err();
        assert!(err.to_string().contains("200"), "{err}");

        // The ignore index is always legal.
        labels[0] = IGNORE_INDEX;
        pnm::write_pgm(&victim, w, h, &labels).unwrap();
        assert!(load_dataset(dir.path(), &spec.name).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

        #[test]
        fn rendering_is_deterministic_and_well_labeled(seed in 0u64..1000, density in 1usize..4, extent in 1usize..3) {
            let spec = DomainGenSpec {
                seed,
                density,
                height: 32 * extent,
                width: 32 * extent,
                ..tiny_spec()
            };
            let a = render_sample(&spec, 0).unwrap();
            let b = render_sample(&spec, 0).unwrap();
            prop_assert_eq!(image_bits(&a), image_bits(&b));
            prop_assert_eq!(&a.labels, &b.labels);
            prop_assert!(a.labels.iter().all(|&l| l <= 3));
            prop_assert!(a.labels.contains(&0));
            prop_assert!(a.labels.iter().any(|&l| l != 0));
            prop_assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
        }
    }
}
