//! Dataset ingestion from `images/` + `labels/` directories, normalization,
//! cropping and the handedness-aware flip.

mod synth;

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{s, Array2, Array3};
use rand::Rng;

use crate::domain::{labels_to_masks, masks_to_labels, validate_labels, Class, ImageSample, LabelMap, MaskSet};
use crate::error::{Error, Result};

pub use synth::{contact_classes, synth_generate, synth_samples, SynthSpec, SynthSummary};

pub const DEFAULT_MEAN: [f32; 3] = [106.011, 95.400, 87.429];
pub const DEFAULT_STD: [f32; 3] = [64.357, 60.889, 61.419];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
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
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub crop_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: Split, crop_size: usize) -> Self {
        Self {
            root: root.into(),
            split,
            crop_size,
            mean: DEFAULT_MEAN,
            std: DEFAULT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    /// `<root>/<split>` when it exists, else `<root>` itself.
    pub fn split_dir(&self) -> PathBuf {
        let nested = self.root.join(self.split.as_str());
        if nested.join("images").is_dir() {
            nested
        } else {
            self.root.clone()
        }
    }
}

/// Raw, unnormalized pixels with labels, before cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Matching image/label pairs in basename order.
pub fn list_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    let mut pairs = Vec::new();
    for image in sorted_files(&images)? {
        let label = labels.join(format!("{}.png", stem(&image)));
        if !label.is_file() {
            return Err(Error::Sample {
                path: image,
                message: format!("missing label file {}", label.display()),
            });
        }
        pairs.push((image, label));
    }
    for label in sorted_files(&labels)? {
        if !pairs.iter().any(|(_, l)| *l == label) {
            return Err(Error::Sample {
                path: label,
                message: "label has no matching image".into(),
            });
        }
    }
    Ok(pairs)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let labels = Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::shape(e.to_string()))?;
    validate_labels(&labels).map_err(|e| Error::Sample {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dim();
    let img = GrayImage::from_raw(w as u32, h as u32, labels.iter().copied().collect())
        .ok_or_else(|| Error::shape("label buffer size"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_raw(image_path: &Path, label_path: &Path) -> Result<RawSample> {
    let image = image::open(image_path)
        .map_err(|source| Error::Image {
            path: image_path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let labels = read_labels(label_path)?;
    if labels.dim() != (image.height() as usize, image.width() as usize) {
        return Err(Error::Sample {
            path: label_path.to_path_buf(),
            message: format!(
                "label size {:?} differs from image {}×{}",
                labels.dim(),
                image.height(),
                image.width()
            ),
        });
    }
    Ok(RawSample {
        id: stem(image_path),
        image,
        labels,
    })
}

/// Every raw pair of the split, in basename order.
pub fn load_raw(spec: &DatasetSpec) -> Result<Vec<RawSample>> {
    spec.validate()?;
    list_pairs(&spec.split_dir())?
        .iter()
        .map(|(i, l)| read_raw(i, l))
        .collect()
}

/// Top-left corner of a `size×size` window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Crop {
    pub fn center(h: usize, w: usize, size: usize) -> Result<Self> {
        Self::check(h, w, size)?;
        Ok(Self {
            top: (h - size) / 2,
            left: (w - size) / 2,
            size,
        })
    }

    pub fn random<R: Rng>(h: usize, w: usize, size: usize, rng: &mut R) -> Result<Self> {
        Self::check(h, w, size)?;
        Ok(Self {
            top: rng.random_range(0..=h - size),
            left: rng.random_range(0..=w - size),
            size,
        })
    }

    fn check(h: usize, w: usize, size: usize) -> Result<()> {
        if h < size || w < size {
            return Err(Error::validation(format!("{h}×{w} image is smaller than crop {size}")));
        }
        Ok(())
    }
}

/// Crop, optionally mirror, and normalize a raw sample.
pub fn prepare(raw: &RawSample, crop: Crop, flip: bool, mean: &[f32; 3], std: &[f32; 3]) -> Result<ImageSample> {
    let size = crop.size;
    let mut pixels = Array3::<f32>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let p = raw.image.get_pixel((crop.left + x) as u32, (crop.top + y) as u32);
            for c in 0..3 {
                pixels[[y, x, c]] = (p[c] as f32 - mean[c]) / std[c];
            }
        }
    }
    let labels = raw
        .labels
        .slice(s![crop.top..crop.top + size, crop.left..crop.left + size])
        .to_owned();
    let sample = ImageSample::new(raw.id.clone(), pixels, labels)?;
    Ok(if flip { flip_horizontal(&sample) } else { sample })
}

/// Horizontal mirror with handedness swap (lh↔rh, lo↔ro).
pub fn flip_horizontal(sample: &ImageSample) -> ImageSample {
    let pixels = sample.pixels.slice(s![.., ..;-1, ..]).to_owned();
    let labels = sample.labels.slice(s![.., ..;-1]).mapv(|v| match v {
        0 => 0,
        l => Class::from_index(l as usize - 1)
            .map(|c| c.mirrored().label())
            .unwrap_or(l),
    });
    ImageSample {
        id: sample.id.clone(),
        pixels,
        labels,
    }
}

/// Normalized, center-cropped samples in basename order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<ImageSample>> {
    load_raw(spec)?
        .iter()
        .map(|raw| {
            let crop = Crop::center(raw.labels.nrows(), raw.labels.ncols(), spec.crop_size)?;
            prepare(raw, crop, false, &spec.mean, &spec.std)
        })
        .collect()
}

/// Build index labels from per-class binary mask files named
/// `<stem>_<lh|rh|lo|ro|to>.png` (missing files mean an empty class).
pub fn convert_mask_files(src: &Path, dst: &Path) -> Result<usize> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    let mut stems: Vec<String> = Vec::new();
    for f in sorted_files(src)? {
        let s = stem(&f);
        if let Some((base, suffix)) = s.rsplit_once('_') {
            if Class::ALL.iter().any(|c| c.short_name() == suffix) && !stems.iter().any(|x| x == base) {
                stems.push(base.to_string());
            }
        }
    }
    for base in &stems {
        let mut masks: Option<MaskSet> = None;
        for class in Class::ALL {
            let path = src.join(format!("{base}_{}.png", class.short_name()));
            if !path.is_file() {
                continue;
            }
            let img = image::open(&path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?
                .into_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let m = masks.get_or_insert_with(|| MaskSet::zeros(h, w));
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::Sample {
                    path,
                    message: "mask size differs from its siblings".into(),
                });
            }
            let mut plane = m.plane_mut(class);
            for (dst_px, src_px) in plane.iter_mut().zip(img.as_raw()) {
                *dst_px = (*src_px > 0) as u8;
            }
        }
        let Some(masks) = masks else { continue };
        let labels = masks_to_labels(&masks).map_err(|e| Error::Sample {
            path: src.join(base),
            message: e.to_string(),
        })?;
        write_labels(&dst.join(format!("{base}.png")), &labels)?;
    }
    Ok(stems.len())
}

/// Index labels to masks and back, used to check stored label files.
pub fn roundtrip(labels: &LabelMap) -> Result<LabelMap> {
    masks_to_labels(&labels_to_masks(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_swaps_handedness() {
        let mut labels = LabelMap::zeros((1, 3));
        labels[[0, 0]] = Class::LeftHand.label();
        labels[[0, 1]] = Class::TwoHandObject.label();
        labels[[0, 2]] = Class::LeftObject.label();
        let pixels = Array3::from_shape_fn((1, 3, 3), |(_, x, c)| (x * 3 + c) as f32);
        let s = ImageSample::new("a", pixels, labels).unwrap();
        let f = flip_horizontal(&s);
        assert_eq!(
            f.labels.row(0).to_vec(),
            vec![Class::RightObject.label(), Class::TwoHandObject.label(), Class::RightHand.label()]
        );
        assert_eq!(f.pixels[[0, 0, 1]], 7.0);
        assert_eq!(flip_horizontal(&f), s);
    }

    #[test]
    fn crops() {
        let c = Crop::center(10, 12, 4).unwrap();
        assert_eq!((c.top, c.left), (3, 4));
        assert!(Crop::center(3, 12, 4).is_err());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        for _ in 0..50 {
            let c = Crop::random(10, 12, 4, &mut rng).unwrap();
            assert!(c.top <= 6 && c.left <= 8);
        }
    }

    #[test]
    fn split_names() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
    }
}
