//! Foreground masks: ingestion from segmenter output and resizing to latent
//! resolution.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::image::{area_resample, quantize};
use crate::latent::SpatialMap;

pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    /// Binary map at source resolution, values in `{0, 1}`.
    pub image_mask: SpatialMap,
    /// Soft map at latent resolution, values in `[0, 1]`. `None` until
    /// [`resize_to_latent`](Self::resize_to_latent) has run.
    pub latent_mask: Option<SpatialMap>,
    pub class_word: String,
}

impl ForegroundMask {
    /// Binarizes a `[0, 1]` map at [`BINARIZE_THRESHOLD`].
    pub fn from_values(
        height: usize,
        width: usize,
        values: &[f64],
        class_word: &str,
    ) -> Result<Self> {
        let data: Vec<f64> = values
            .iter()
            .map(|&v| if v >= BINARIZE_THRESHOLD { 1.0 } else { 0.0 })
            .collect();
        let image_mask = SpatialMap::new(height, width, data)?;
        if image_mask.data.iter().all(|&v| v == 0.0) {
            return Err(Error::EmptyMask(PathBuf::from("<memory>")));
        }
        Ok(Self {
            image_mask,
            latent_mask: None,
            class_word: class_word.to_string(),
        })
    }

    /// Loads a single-channel mask image (white = foreground).
    ///
    /// RGB(A) files are accepted only when every pixel is grey; anything else
    /// is ambiguous about which channel carries the mask.
    pub fn load(path: &Path, class_word: &str) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let values = luma_values(&img, path)?;
        Self::from_values(height, width, &values, class_word).map_err(|e| match e {
            Error::EmptyMask(_) => Error::EmptyMask(path.to_path_buf()),
            other => other,
        })
    }

    /// Area-average downsampling of the binary mask to `(height, width)`.
    pub fn resize_to_latent(&self, latent: (usize, usize)) -> Result<Self> {
        let (h, w) = latent;
        let src = (self.image_mask.height, self.image_mask.width);
        if h == 0 || w == 0 || h > src.0 || w > src.1 {
            return Err(Error::Upsample { from: src, to: latent });
        }
        let data = area_resample(&self.image_mask.data, src.0, src.1, h, w)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Ok(Self {
            image_mask: self.image_mask.clone(),
            latent_mask: Some(SpatialMap::new(h, w, data)?),
            class_word: self.class_word.clone(),
        })
    }

    pub fn latent(&self) -> Result<&SpatialMap> {
        self.latent_mask.as_ref().ok_or_else(|| Error::Shape {
            expected: "mask resized to latent resolution".into(),
            actual: "image-resolution mask only".into(),
        })
    }

    /// `1 - m_f` over the latent mask.
    pub fn complement(&self) -> Result<SpatialMap> {
        Ok(complement(self.latent()?))
    }
}

pub fn complement(map: &SpatialMap) -> SpatialMap {
    SpatialMap {
        height: map.height,
        width: map.width,
        data: map.data.iter().map(|m| 1.0 - m).collect(),
    }
}

/// Writes a `[0, 1]` map as an 8-bit greyscale PNG.
pub fn save_mask(map: &SpatialMap, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        image::Luma([quantize(map.data[y as usize * map.width + x as usize])])
    });
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn luma_values(img: &DynamicImage, path: &Path) -> Result<Vec<f64>> {
    let channels = img.color().channel_count();
    match channels {
        1 | 2 => Ok(img
            .to_luma32f()
            .pixels()
            .map(|p| p[0] as f64)
            .collect()),
        _ => {
            let rgb = img.to_rgb32f();
            let grey = rgb.pixels().all(|p| p[0] == p[1] && p[1] == p[2]);
            if !grey {
                return Err(Error::MultiChannelMask {
                    path: path.to_path_buf(),
                    channels,
                });
            }
            Ok(rgb.pixels().map(|p| p[0] as f64).collect())
        }
    }
}

/// Produces a mask file for `(image, class word)`. Grounded detection plus
/// segmentation lives behind this interface.
pub trait SegmenterClient {
    fn segment(&self, image: &Path, class_word: &str) -> Result<PathBuf>;
}

/// Runs an external program as `<program> <image> <class word>` and reads
/// the mask path from the first line of its stdout.
#[derive(Debug, Clone)]
pub struct ProcessSegmenter {
    pub program: PathBuf,
}

impl SegmenterClient for ProcessSegmenter {
    fn segment(&self, image: &Path, class_word: &str) -> Result<PathBuf> {
        let out = Command::new(&self.program)
            .arg(image)
            .arg(class_word)
            .output()
            .map_err(|e| Error::Client(format!("{}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Client(format!(
                "segmenter exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let line = stdout.lines().next().unwrap_or("").trim();
        if line.is_empty() {
            return Err(Error::Client("segmenter returned no mask path".into()));
        }
        Ok(PathBuf::from(line))
    }
}

/// Segments with `client`, then loads the resulting mask.
pub fn segment_and_load(
    client: &dyn SegmenterClient,
    image: &Path,
    class_word: &str,
) -> Result<ForegroundMask> {
    let path = client.segment(image, class_word)?;
    ForegroundMask::load(&path, class_word)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn write_gray(dir: &Path, name: &str, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> PathBuf {
        let path = dir.join(name);
        GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(&path).unwrap();
        path
    }

    #[test]
    fn oval_mask_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_gray(dir.path(), "oval.png", 512, 512, |x, y| {
            let dx = (x as f64 - 256.0) / 120.0;
            let dy = (y as f64 - 256.0) / 180.0;
            if dx * dx + dy * dy <= 1.0 { 255 } else { 0 }
        });
        let m = ForegroundMask::load(&path, "face").unwrap();
        assert_eq!((m.image_mask.height, m.image_mask.width), (512, 512));
        assert_eq!(m.image_mask.data[256 * 512 + 256], 1.0);
        assert_eq!(m.image_mask.data[0], 0.0);
        assert_eq!(m.class_word, "face");
        assert!(m.image_mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn all_black_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_gray(dir.path(), "black.png", 16, 16, |_, _| 0);
        let err = ForegroundMask::load(&path, "face").unwrap_err();
        assert!(matches!(err, Error::EmptyMask(_)));
        assert!(err.to_string().contains("empty foreground mask"));
    }

    #[test]
    fn grey_level_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        // 0.7 * 255 rounded
        let path = write_gray(dir.path(), "g.png", 4, 4, |x, _| if x < 2 { 179 } else { 0 });
        let m = ForegroundMask::load(&path, "hair").unwrap();
        assert_eq!(m.image_mask.data[0], 1.0);
        assert_eq!(m.image_mask.data[3], 0.0);
    }

    #[test]
    fn coloured_mask_is_ambiguous() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        RgbImage::from_fn(4, 4, |x, _| if x == 0 { Rgb([255, 0, 0]) } else { Rgb([0, 0, 0]) })
            .save(&path)
            .unwrap();
        assert!(matches!(
            ForegroundMask::load(&path, "face"),
            Err(Error::MultiChannelMask { .. })
        ));
        let grey = dir.path().join("g.png");
        RgbImage::from_fn(4, 4, |_, _| Rgb([255, 255, 255])).save(&grey).unwrap();
        assert!(ForegroundMask::load(&grey, "face").is_ok());
    }

    #[test]
    fn unreadable_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(
            ForegroundMask::load(&path, "face"),
            Err(Error::Decode { .. })
        ));
        assert!(matches!(
            ForegroundMask::load(&dir.path().join("missing.png"), "face"),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn all_ones_resizes_to_all_ones() {
        let m = ForegroundMask::from_values(512, 512, &vec![1.0; 512 * 512], "face").unwrap();
        let r = m.resize_to_latent((64, 64)).unwrap();
        assert!(r.latent().unwrap().data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkerboard_pools_to_half() {
        let m = ForegroundMask::from_values(2, 2, &[0.0, 1.0, 1.0, 0.0], "face").unwrap();
        let r = m.resize_to_latent((1, 1)).unwrap();
        assert_eq!(r.latent().unwrap().data, vec![0.5]);
    }

    #[test]
    fn half_plane_boundary_is_soft() {
        // 8 wide, left 3 columns set: pooling by 2 puts the split inside window 1
        let values: Vec<f64> = (0..4 * 8).map(|i| if i % 8 < 3 { 1.0 } else { 0.0 }).collect();
        let m = ForegroundMask::from_values(4, 8, &values, "face").unwrap();
        let r = m.resize_to_latent((2, 4)).unwrap();
        assert_eq!(r.latent().unwrap().data, vec![1.0, 0.5, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0]);
        // aligned split stays hard
        let values: Vec<f64> = (0..4 * 8).map(|i| if i % 8 < 4 { 1.0 } else { 0.0 }).collect();
        let m = ForegroundMask::from_values(4, 8, &values, "face").unwrap();
        let r = m.resize_to_latent((2, 4)).unwrap();
        assert_eq!(r.latent().unwrap().data, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsampling_rejected() {
        let m = ForegroundMask::from_values(4, 4, &[1.0; 16], "face").unwrap();
        assert!(matches!(m.resize_to_latent((8, 8)), Err(Error::Upsample { .. })));
    }

    #[test]
    fn complement_examples() {
        let ones = SpatialMap::filled(2, 2, 1.0);
        assert!(complement(&ones).data.iter().all(|&v| v == 0.0));
        let q = SpatialMap::filled(1, 1, 0.25);
        assert_eq!(complement(&q).data, vec![0.75]);
        let m = SpatialMap::new(1, 3, vec![0.125, 0.5, 0.75]).unwrap();
        assert_eq!(complement(&complement(&m)), m);
    }

    #[test]
    fn process_segmenter_reads_path() {
        let dir = tempfile::tempdir().unwrap();
        let mask = write_gray(dir.path(), "m.png", 8, 8, |x, _| if x < 4 { 255 } else { 0 });
        let script = dir.path().join("seg.sh");
        std::fs::write(&script, format!("#!/bin/sh\necho {}\n", mask.display())).unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
            let seg = ProcessSegmenter { program: script };
            let m = segment_and_load(&seg, Path::new("img.png"), "face").unwrap();
            assert_eq!(m.image_mask.data.iter().sum::<f64>(), 32.0);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_of_unity(vals in proptest::collection::vec(0.0f64..=1.0, 16)) {
                let m = SpatialMap::new(4, 4, vals).unwrap();
                let c = complement(&m);
                for (a, b) in m.data.iter().zip(&c.data) {
                    prop_assert_eq!(a + b, 1.0);
                }
            }

            #[test]
            fn resize_preserves_mass(bits in proptest::collection::vec(any::<bool>(), 64), k in 1usize..=3) {
                prop_assume!(bits.iter().any(|&b| b));
                let vals: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let m = ForegroundMask::from_values(8, 8, &vals, "x").unwrap();
                let side = [8, 4, 2][k - 1];
                let r = m.resize_to_latent((side, side)).unwrap();
                let lat = r.latent().unwrap();
                let window = (64 / (side * side)) as f64;
                prop_assert!((lat.mean() - m.image_mask.mean()).abs() <= 1.0 / window + 1e-12);
                prop_assert!(lat.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
