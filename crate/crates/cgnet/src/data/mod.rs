//! Dataset plumbing: netpbm image/label I/O, manifests, per-channel means,
//! and a deterministic synthetic segmentation dataset.

pub mod netpbm;
pub mod synth;

pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use synth::gen_synthetic;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

/// Reserved label value excluded from loss and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Integer label map, `[H, W]`, values in `[0, K)` or 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        LabelMap {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }
}

/// One image/label pair, image as `[3, H, W]` with values 0..=255.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let dims = self.image.dims();
        if dims.len() != 3 || dims[0] != 3 || dims[1] != self.labels.h || dims[2] != self.labels.w {
            return Err(Error::Shape(format!(
                "image {dims:?} and labels {}x{} disagree",
                self.labels.h, self.labels.w
            )));
        }
        for (i, &l) in self.labels.data.iter().enumerate() {
            if l != IGNORE_INDEX && l as usize >= num_classes {
                return Err(Error::InvalidArg(format!(
                    "label {l} at pixel {i} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered list of image/label paths plus the class count.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub num_classes: usize,
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    /// Parse a manifest file: a `classes=K` header, then one
    /// `image<TAB>label` pair per line. `#` starts a comment. Relative paths
    /// resolve against the manifest's directory. All referenced files must
    /// exist.
    pub fn load(path: &Path) -> Result<Manifest> {
        let pstr = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut num_classes: Option<usize> = None;
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("classes=") {
                let k = v.trim().parse::<usize>().map_err(|_| {
                    Error::Config(format!("{pstr}:{}: invalid classes value '{v}'", lineno + 1))
                })?;
                num_classes = Some(k);
                continue;
            }
            let (img, lab) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!(
                    "{pstr}:{}: expected 'image<TAB>label'",
                    lineno + 1
                ))
            })?;
            let resolve = |s: &str| {
                let p = Path::new(s);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            let (ip, lp) = (resolve(img.trim()), resolve(lab.trim()));
            for p in [&ip, &lp] {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{pstr}:{}: referenced file {} does not exist",
                        lineno + 1,
                        p.display()
                    )));
                }
            }
            pairs.push((ip, lp));
        }
        let num_classes = num_classes
            .ok_or_else(|| Error::Config(format!("{pstr}: missing 'classes=K' header")))?;
        if num_classes < 2 {
            return Err(Error::Config(format!("{pstr}: classes must be >= 2")));
        }
        Ok(Manifest { num_classes, pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pstr = path.display().to_string();
        let mut text = format!("classes={}\n", self.num_classes);
        for (img, lab) in &self.pairs {
            text.push_str(&format!("{}\t{}\n", img.display(), lab.display()));
        }
        std::fs::write(path, text).map_err(|e| Error::io(&pstr, e))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Load and validate every sample, in manifest order.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(self.pairs.len());
        for (img, lab) in &self.pairs {
            let sample = Sample {
                image: read_ppm(img)?,
                labels: read_pgm(lab)?,
            };
            sample.validate(self.num_classes)?;
            out.push(sample);
        }
        Ok(out)
    }
}

/// Map `class -> category` parsed from lines of `class_id category_id`.
pub fn load_category_map(path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
    let mut map = vec![usize::MAX; num_classes];
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| {
            tok.and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| {
                Error::Config(format!("{pstr}:{}: expected 'class category'", lineno + 1))
            })
        };
        let class = parse(it.next())?;
        let cat = parse(it.next())?;
        if class >= num_classes {
            return Err(Error::Config(format!(
                "{pstr}:{}: class {class} out of range",
                lineno + 1
            )));
        }
        map[class] = cat;
    }
    if let Some(missing) = map.iter().position(|&c| c == usize::MAX) {
        return Err(Error::Config(format!(
            "{pstr}: class {missing} has no category"
        )));
    }
    Ok(map)
}

/// Per-channel mean over all pixels of all images, one pass, f64 accumulation.
pub fn compute_means(manifest: &Manifest) -> Result<[f64; 3]> {
    if manifest.is_empty() {
        return Err(Error::InvalidArg("empty manifest".into()));
    }
    let mut sums = [0.0f64; 3];
    let mut count: u64 = 0;
    for (img_path, _) in &manifest.pairs {
        let img = read_ppm(img_path)?;
        let dims = img.dims();
        let plane = dims[1] * dims[2];
        let d = img.data();
        for c in 0..3 {
            let mut acc = 0.0f64;
            for &v in &d[c * plane..(c + 1) * plane] {
                acc += v as f64;
            }
            sums[c] += acc;
        }
        count += plane as u64;
    }
    Ok([
        sums[0] / count as f64,
        sums[1] / count as f64,
        sums[2] / count as f64,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_solid(dir: &Path, name: &str, value: f32, side: usize) -> PathBuf {
        let p = dir.join(name);
        let img = Tensor::full(&[3, side, side], value).unwrap();
        write_ppm(&p, &img).unwrap();
        p
    }

    fn write_labels(dir: &Path, name: &str, side: usize) -> PathBuf {
        let p = dir.join(name);
        write_pgm(&p, &LabelMap::filled(side, side, 0)).unwrap();
        p
    }

    #[test]
    fn means_of_solid_images() {
        let dir = tempdir().unwrap();
        let i1 = write_solid(dir.path(), "a.ppm", 128.0, 4);
        let l1 = write_labels(dir.path(), "a.pgm", 4);
        let m = Manifest {
            num_classes: 2,
            pairs: vec![(i1.clone(), l1.clone())],
        };
        assert_eq!(compute_means(&m).unwrap(), [128.0, 128.0, 128.0]);

        let i2 = write_solid(dir.path(), "b.ppm", 0.0, 4);
        let i3 = write_solid(dir.path(), "c.ppm", 100.0, 4);
        let m2 = Manifest {
            num_classes: 2,
            pairs: vec![(i2, l1.clone()), (i3, l1)],
        };
        assert_eq!(compute_means(&m2).unwrap(), [50.0, 50.0, 50.0]);
    }

    #[test]
    fn means_match_two_pass_oracle() {
        let dir = tempdir().unwrap();
        let mut rng = crate::rng::Pcg32::new(3, 0);
        let mut pairs = Vec::new();
        let mut all: Vec<Vec<f32>> = vec![Vec::new(); 3];
        for i in 0..3 {
            let data: Vec<f32> = (0..3 * 6 * 6).map(|_| rng.below(256) as f32).collect();
            for c in 0..3 {
                all[c].extend_from_slice(&data[c * 36..(c + 1) * 36]);
            }
            let img = Tensor::from_vec(&[3, 6, 6], data).unwrap();
            let p = dir.path().join(format!("{i}.ppm"));
            write_ppm(&p, &img).unwrap();
            pairs.push((p, write_labels(dir.path(), &format!("{i}.pgm"), 6)));
        }
        let m = Manifest {
            num_classes: 2,
            pairs,
        };
        let got = compute_means(&m).unwrap();
        // two-pass oracle: collect everything, then average
        for c in 0..3 {
            let want = all[c].iter().map(|&v| v as f64).sum::<f64>() / all[c].len() as f64;
            assert!((got[c] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn manifest_roundtrip_and_order() {
        let dir = tempdir().unwrap();
        let mut pairs = Vec::new();
        for i in 0..4 {
            let img = write_solid(dir.path(), &format!("i{i}.ppm"), 10.0 * i as f32, 2);
            let lab = write_labels(dir.path(), &format!("l{i}.pgm"), 2);
            pairs.push((img, lab));
        }
        let m = Manifest {
            num_classes: 3,
            pairs: pairs.clone(),
        };
        let mp = dir.path().join("manifest.txt");
        m.save(&mp).unwrap();
        let m2 = Manifest::load(&mp).unwrap();
        assert_eq!(m2.num_classes, 3);
        assert_eq!(m2.pairs, pairs);
    }

    #[test]
    fn manifest_missing_file_rejected() {
        let dir = tempdir().unwrap();
        let mp = dir.path().join("manifest.txt");
        std::fs::write(&mp, "classes=3\nmissing.ppm\tmissing.pgm\n").unwrap();
        assert!(Manifest::load(&mp).is_err());
    }

    #[test]
    fn manifest_requires_header() {
        let dir = tempdir().unwrap();
        let mp = dir.path().join("manifest.txt");
        std::fs::write(&mp, "# no header\n").unwrap();
        let err = Manifest::load(&mp).unwrap_err();
        assert!(err.to_string().contains("classes"), "{err}");
    }

    #[test]
    fn category_map_parsing() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("cats.txt");
        std::fs::write(&p, "0 0\n1 0\n2 1\n# comment\n3 1\n").unwrap();
        assert_eq!(load_category_map(&p, 4).unwrap(), vec![0, 0, 1, 1]);
        assert!(load_category_map(&p, 5).is_err()); // class 4 unmapped
    }
}
