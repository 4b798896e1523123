//! Deterministic synthetic scenes: Gaussian intensity blobs of controlled
//! radii on a noisy background, with exact center annotations. Stands in for
//! real multi-scale datasets so scale-routing behavior is testable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::densitymap::{read_points, write_points, Point, PointSet};
use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::{Shape, Tensor};

/// Grayscale image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(h: usize, w: usize) -> Self {
        GrayImage {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    /// View as a (1, 1, h, w) tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(1, 1, self.h, self.w), self.data.clone()).expect("image shape")
    }
}

/// One blob population: rendered radius, how many per scene, how bright.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobClass {
    pub radius: f64,
    pub count_min: usize,
    pub count_max: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<BlobClass>,
    /// Rendered Gaussian width as a multiple of the class radius
    /// (sigma = render_width * radius).
    pub render_width: f64,
    /// Amplitude of the additive uniform background noise.
    pub noise_amplitude: f64,
    /// Minimum distance between any two blob centers, in pixels.
    pub min_separation: f64,
    /// Minimum distance from every center to the image border, in pixels.
    /// Raised per class to the blob's own 3-sigma render support. Large
    /// enough margins keep the full density-kernel mass of every annotation
    /// inside the grid, so map sums equal counts exactly.
    pub placement_margin: f64,
    /// Placement attempts per blob before giving up.
    pub max_place_tries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            classes: vec![
                BlobClass {
                    radius: 2.0,
                    count_min: 14,
                    count_max: 22,
                    intensity_min: 0.55,
                    intensity_max: 0.95,
                },
                BlobClass {
                    radius: 12.0,
                    count_min: 2,
                    count_max: 4,
                    intensity_min: 0.6,
                    intensity_max: 1.0,
                },
            ],
            render_width: 0.5,
            noise_amplitude: 0.05,
            min_separation: 10.0,
            placement_margin: 0.0,
            max_place_tries: 1000,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene spec", "image size must be positive"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.radius <= 0.0 {
                return Err(Error::invalid(
                    "scene spec",
                    format!("class {i}: radius must be positive"),
                ));
            }
            if c.count_min > c.count_max {
                return Err(Error::invalid(
                    "scene spec",
                    format!("class {i}: count range is inverted"),
                ));
            }
            if !(0.0..=1.0).contains(&c.intensity_min)
                || !(0.0..=1.0).contains(&c.intensity_max)
                || c.intensity_min > c.intensity_max
            {
                return Err(Error::invalid(
                    "scene spec",
                    format!("class {i}: intensity range must sit inside [0, 1]"),
                ));
            }
            // A blob needs its full 3-sigma render support inside the image.
            let margin = (3.0 * self.render_width * c.radius).max(self.placement_margin);
            if 2.0 * margin >= self.width as f64 || 2.0 * margin >= self.height as f64 {
                return Err(Error::invalid(
                    "scene spec",
                    format!("class {i}: radius {} does not fit the image", c.radius),
                ));
            }
        }
        if self.noise_amplitude < 0.0 || self.noise_amplitude > 1.0 {
            return Err(Error::invalid("scene spec", "noise amplitude outside [0, 1]"));
        }
        if !(self.render_width > 0.0) {
            return Err(Error::invalid("scene spec", "render width must be positive"));
        }
        Ok(())
    }

    /// Canonical text form, hashed into manifests to detect spec drift.
    pub fn canonical_text(&self) -> String {
        let mut s = format!(
            "h={} w={} render={} noise={} sep={} margin={} tries={}\n",
            self.height,
            self.width,
            self.render_width,
            self.noise_amplitude,
            self.min_separation,
            self.placement_margin,
            self.max_place_tries
        );
        for c in &self.classes {
            s.push_str(&format!(
                "class r={} n={}..{} i={}..{}\n",
                c.radius, c.count_min, c.count_max, c.intensity_min, c.intensity_max
            ));
        }
        s
    }
}

/// Render one scene. A pure function of `(spec, seed)`: identical inputs
/// produce bit-identical images and annotations.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(GrayImage, PointSet)> {
    spec.validate()?;
    let mut rng = Rng::derive(seed, "scene");
    let (h, w) = (spec.height as f64, spec.width as f64);

    // Sample counts, then centers with rejection on the separation
    // constraint, then amplitudes; rendering afterwards consumes no
    // randomness except the per-pixel noise.
    struct Blob {
        x: f64,
        y: f64,
        sigma: f64,
        amp: f64,
        radius: f64,
    }
    let mut blobs: Vec<Blob> = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        let count = rng.int_in(class.count_min, class.count_max);
        let margin = (3.0 * spec.render_width * class.radius).max(spec.placement_margin);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..spec.max_place_tries {
                let x = rng.uniform_in(margin, w - 1.0 - margin);
                let y = rng.uniform_in(margin, h - 1.0 - margin);
                let ok = blobs.iter().all(|b| {
                    let d2 = (b.x - x) * (b.x - x) + (b.y - y) * (b.y - y);
                    d2 >= spec.min_separation * spec.min_separation
                });
                if ok {
                    blobs.push(Blob {
                        x,
                        y,
                        sigma: spec.render_width * class.radius,
                        amp: rng.uniform_in(class.intensity_min, class.intensity_max),
                        radius: class.radius,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::SeparationUnsatisfiable {
                    class: ci,
                    placed: blobs.len(),
                    attempts: spec.max_place_tries,
                });
            }
        }
    }

    let mut img = GrayImage::zeros(spec.height, spec.width);
    for v in img.data.iter_mut() {
        *v = spec.noise_amplitude * rng.uniform();
    }
    for b in &blobs {
        let support = (3.0 * b.sigma).ceil() as i64;
        let (cx, cy) = (b.x, b.y);
        let r0 = ((cy - support as f64).floor() as i64).max(0);
        let r1 = ((cy + support as f64).ceil() as i64).min(spec.height as i64 - 1);
        let c0 = ((cx - support as f64).floor() as i64).max(0);
        let c1 = ((cx + support as f64).ceil() as i64).min(spec.width as i64 - 1);
        let inv2s2 = 1.0 / (2.0 * b.sigma * b.sigma);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d2 = (r as f64 - cy) * (r as f64 - cy) + (c as f64 - cx) * (c as f64 - cx);
                img.data[r as usize * spec.width + c as usize] += b.amp * (-d2 * inv2s2).exp();
            }
        }
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let points = PointSet::new(
        blobs
            .iter()
            .map(|b| Point::with_radius(b.x, b.y, b.radius))
            .collect(),
    );
    Ok((img, points))
}

// ---------------------------------------------------------------------------
// PGM (P5) image files
// ---------------------------------------------------------------------------

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    bytes.extend(img.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header: "P5", width, height, maxval as whitespace-separated tokens,
    // with '#' comments allowed; one whitespace byte then raw payload.
    fn next_token<'a>(bytes: &'a [u8], mut i: usize, path: &Path) -> Result<(&'a [u8], usize)> {
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(path, 1, "truncated PGM header"));
        }
        Ok((&bytes[start..i], i))
    }

    let (magic, mut pos) = next_token(&bytes, 0, path)?;
    if magic != b"P5" {
        return Err(Error::parse(
            path,
            1,
            format!("expected P5 magic, got `{}`", String::from_utf8_lossy(magic)),
        ));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let (t, next) = next_token(&bytes, pos, path)?;
        pos = next;
        *d = String::from_utf8_lossy(t)
            .parse()
            .map_err(|_| Error::parse(path, 1, "bad PGM header field"))?;
    }
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(path, 1, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(Error::parse(path, 1, "truncated PGM payload"));
    }
    let data = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok(GrayImage { h, w, data })
}

// ---------------------------------------------------------------------------
// corpus layout: manifest.tsv + checksums.tsv + images/ + annotations/
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(
                "split",
                format!("expected train, val or test, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub split: Split,
    /// Paths relative to the corpus root.
    pub image: PathBuf,
    pub annotation: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec_hash: u64,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&CorpusEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// How many scenes to generate per split.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub scene: SceneSpec,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

const MANIFEST_FILE: &str = "manifest.tsv";
const CHECKSUM_FILE: &str = "checksums.tsv";

/// Generate every scene and write the corpus under `root`.
pub fn write_corpus(root: &Path, spec: &CorpusSpec, seed: u64) -> Result<CorpusManifest> {
    spec.scene.validate()?;
    let images = root.join("images");
    let annotations = root.join("annotations");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&annotations).map_err(|e| Error::io(&annotations, e))?;

    let spec_hash = fnv1a64(spec.scene.canonical_text().as_bytes());
    let mut entries = Vec::new();
    let mut checksums = String::new();
    let mut scene_index = 0u64;
    for (split, count) in [
        (Split::Train, spec.train),
        (Split::Val, spec.val),
        (Split::Test, spec.test),
    ] {
        for i in 0..count {
            let scene_seed = fnv1a64(&[seed.to_le_bytes(), scene_index.to_le_bytes()].concat());
            scene_index += 1;
            let (img, pts) = generate_scene(&spec.scene, scene_seed)?;
            let image_rel = PathBuf::from(format!("images/{}_{i:04}.pgm", split.as_str()));
            let ann_rel = PathBuf::from(format!("annotations/{}_{i:04}.txt", split.as_str()));
            write_pgm(&root.join(&image_rel), &img)?;
            write_points(&root.join(&ann_rel), &pts)?;
            for rel in [&image_rel, &ann_rel] {
                let bytes = fs::read(root.join(rel)).map_err(|e| Error::io(root.join(rel), e))?;
                checksums.push_str(&format!("{}\t{:016x}\n", rel.display(), fnv1a64(&bytes)));
            }
            entries.push(CorpusEntry {
                split,
                image: image_rel,
                annotation: ann_rel,
            });
        }
    }

    let mut manifest = format!("# seed={seed}\n# spec_hash={spec_hash:016x}\n");
    for e in &entries {
        manifest.push_str(&format!(
            "{}\t{}\t{}\n",
            e.split.as_str(),
            e.image.display(),
            e.annotation.display()
        ));
    }
    fs::write(root.join(MANIFEST_FILE), manifest)
        .map_err(|e| Error::io(root.join(MANIFEST_FILE), e))?;
    fs::write(root.join(CHECKSUM_FILE), checksums)
        .map_err(|e| Error::io(root.join(CHECKSUM_FILE), e))?;

    Ok(CorpusManifest {
        seed,
        spec_hash,
        entries,
    })
}

/// Parse the manifest, check that every referenced file exists, and verify
/// checksums when a checksum file is present.
pub fn read_corpus(root: &Path) -> Result<CorpusManifest> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut seed = 0u64;
    let mut spec_hash = 0u64;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("seed=") {
                seed = v
                    .parse()
                    .map_err(|_| Error::parse(&manifest_path, lineno, "bad seed"))?;
            } else if let Some(v) = comment.strip_prefix("spec_hash=") {
                spec_hash = u64::from_str_radix(v, 16)
                    .map_err(|_| Error::parse(&manifest_path, lineno, "bad spec hash"))?;
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                &manifest_path,
                lineno,
                format!("expected `split<TAB>image<TAB>annotation`, got {} fields", fields.len()),
            ));
        }
        let split: Split = fields[0]
            .parse()
            .map_err(|_| Error::parse(&manifest_path, lineno, format!("bad split `{}`", fields[0])))?;
        let entry = CorpusEntry {
            split,
            image: PathBuf::from(fields[1]),
            annotation: PathBuf::from(fields[2]),
        };
        for rel in [&entry.image, &entry.annotation] {
            let p = root.join(rel);
            if !p.exists() {
                return Err(Error::MissingFile { path: p });
            }
        }
        entries.push(entry);
    }

    let checksum_path = root.join(CHECKSUM_FILE);
    if checksum_path.exists() {
        let text = fs::read_to_string(&checksum_path).map_err(|e| Error::io(&checksum_path, e))?;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (rel, expected) = line.split_once('\t').ok_or_else(|| {
                Error::parse(&checksum_path, lineno, "expected `path<TAB>hash`")
            })?;
            let p = root.join(rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let got = format!("{:016x}", fnv1a64(&bytes));
            if got != expected {
                return Err(Error::HashMismatch {
                    path: p,
                    line: lineno,
                    expected: expected.to_string(),
                    got,
                });
            }
        }
    }

    Ok(CorpusManifest {
        seed,
        spec_hash,
        entries,
    })
}

/// A fully loaded scene, ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub image: GrayImage,
    pub points: PointSet,
}

pub fn load_scene(root: &Path, entry: &CorpusEntry) -> Result<LoadedScene> {
    Ok(LoadedScene {
        image: read_pgm(&root.join(&entry.image))?,
        points: read_points(&root.join(&entry.annotation))?,
    })
}
