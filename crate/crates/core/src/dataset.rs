//! Paired datasets on disk: `degraded/NNNN.ppm`, `clean/NNNN.ppm` and a
//! tab-separated manifest from which every file can be regenerated.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{read_ppm, write_atomic, Rgb8};
use crate::scalar::Real;
use crate::synth::{render_pair, DegradationSpec, Mode};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
const MAGIC: &str = "# dan-dataset 1";
const SPEC_PREFIX: &str = "# spec ";
const COLUMNS: &str = "id\tmode\tseed\tdegraded\tclean";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub mode: Mode,
    pub seed: u64,
    pub degraded: String,
    pub clean: String,
}

impl ManifestEntry {
    /// One in five pairs (by seed) is held out for validation.
    pub fn is_validation(&self) -> bool {
        self.seed.is_multiple_of(5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: DegradationSpec,
    pub entries: Vec<ManifestEntry>,
}

/// Seed of pair `i`: consecutive from `base · 10^6`.
pub fn pair_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(1_000_000).wrapping_add(i as u64)
}

/// Mode of pair `i`. In mixed mode haze and snow are interleaved so that
/// any prefix holds `floor(n·ratio)` haze pairs.
pub fn pair_mode(spec: &DegradationSpec, i: usize) -> Mode {
    match spec.mode {
        Mode::Mixed => {
            let r = spec.mixed_ratio;
            if ((i + 1) as f64 * r).floor() > (i as f64 * r).floor() {
                Mode::Haze
            } else {
                Mode::Snow
            }
        }
        m => m,
    }
}

impl Manifest {
    pub fn plan(spec: &DegradationSpec, count: usize) -> Result<Self> {
        spec.validate()?;
        let entries = (0..count)
            .map(|i| {
                let id = format!("{:04}", i);
                ManifestEntry {
                    mode: pair_mode(spec, i),
                    seed: pair_seed(spec.seed, i),
                    degraded: format!("degraded/{}.ppm", id),
                    clean: format!("clean/{}.ppm", id),
                    id,
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            entries,
        })
    }

    pub fn to_text(&self) -> String {
        let spec = serde_json::to_string(&self.spec).expect("spec serialises");
        let mut out = format!("{}\n{}{}\n{}\n", MAGIC, SPEC_PREFIX, spec, COLUMNS);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.id, e.mode, e.seed, e.degraded, e.clean));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, detail: String| Error::Format {
            what: "manifest",
            offset: line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(bad(0, format!("missing {:?} header", MAGIC))),
        }
        let spec = match lines.next() {
            Some((n, l)) if l.starts_with(SPEC_PREFIX) => serde_json::from_str(&l[SPEC_PREFIX.len()..])
                .map_err(|e| bad(n, format!("spec: {}", e)))?,
            _ => return Err(bad(1, "missing spec line".into())),
        };
        match lines.next() {
            Some((_, COLUMNS)) => {}
            _ => return Err(bad(2, "missing column header".into())),
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, mode, seed, degraded, clean] = cols[..] else {
                return Err(bad(n, format!("expected 5 columns, got {}", cols.len())));
            };
            entries.push(ManifestEntry {
                id: id.to_string(),
                mode: mode.parse().map_err(|e| bad(n, format!("{}", e)))?,
                seed: seed.parse().map_err(|_| bad(n, format!("bad seed {:?}", seed)))?,
                degraded: degraded.to_string(),
                clean: clean.to_string(),
            });
        }
        Ok(Self { spec, entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|e| Error::InFile {
            path,
            source: Box::new(e),
        })
    }

    /// Number of (haze, snow) pairs.
    pub fn census(&self) -> (usize, usize) {
        let haze = self.entries.iter().filter(|e| e.mode == Mode::Haze).count();
        (haze, self.entries.len() - haze)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders and writes every pair listed in `manifest`, then the manifest.
pub fn write_dataset(manifest: &Manifest, out_dir: &Path) -> Result<()> {
    create_dir(&out_dir.join("degraded"))?;
    create_dir(&out_dir.join("clean"))?;
    for e in &manifest.entries {
        let (degraded, clean, _) = render_pair::<f64>(&manifest.spec, e.mode, e.seed)?;
        write_atomic(&out_dir.join(&e.degraded), &Rgb8::from_tensor(&degraded)?.encode())?;
        write_atomic(&out_dir.join(&e.clean), &Rgb8::from_tensor(&clean)?.encode())?;
    }
    write_atomic(&out_dir.join(MANIFEST), manifest.to_text().as_bytes())
}

pub fn make_dataset(spec: &DegradationSpec, count: usize, out_dir: &Path) -> Result<Manifest> {
    let manifest = Manifest::plan(spec, count)?;
    write_dataset(&manifest, out_dir)?;
    Ok(manifest)
}

/// Rebuilds a dataset from its manifest alone.
pub fn regenerate(manifest_dir: &Path, out_dir: &Path) -> Result<Manifest> {
    let manifest = Manifest::read(manifest_dir)?;
    write_dataset(&manifest, out_dir)?;
    Ok(manifest)
}

/// A pair as stored on disk (8-bit quantised), `[1, 3, S, S]` each.
#[derive(Clone, Debug)]
pub struct Pair<T> {
    pub id: String,
    pub mode: Mode,
    pub seed: u64,
    pub degraded: Tensor<T>,
    pub clean: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PairSet<T> {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Pair<T>>,
    pub val: Vec<Pair<T>>,
}

impl<T: Real> PairSet<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for e in &manifest.entries {
            let pair = Pair {
                id: e.id.clone(),
                mode: e.mode,
                seed: e.seed,
                degraded: read_ppm(&dir.join(&e.degraded))?,
                clean: read_ppm(&dir.join(&e.clean))?,
            };
            if pair.degraded.shape() != pair.clean.shape() {
                return Err(Error::shape(
                    "PairSet::load",
                    format!("pair {}: {:?} vs {:?}", e.id, pair.degraded.shape(), pair.clean.shape()),
                ));
            }
            if e.is_validation() {
                val.push(pair);
            } else {
                train.push(pair);
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            train,
            val,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn files_under(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for sub in ["degraded", "clean"] {
            for e in fs::read_dir(dir.join(sub)).unwrap() {
                out.push(e.unwrap().path());
            }
        }
        out.sort();
        out
    }

    #[test]
    fn four_pairs_make_eight_images_and_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(&DegradationSpec::new(Mode::Haze, 7, 32), 4, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert_eq!(files_under(dir.path()).len(), 8);
        let top: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(top.len(), 3);
        assert!(dir.path().join(MANIFEST).is_file());
    }

    #[test]
    fn regenerated_files_are_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_dataset(&DegradationSpec::new(Mode::Mixed, 3, 32), 6, a.path()).unwrap();
        regenerate(a.path(), b.path()).unwrap();
        let (fa, fb) = (files_under(a.path()), files_under(b.path()));
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{:?}", x.file_name());
        }
        assert_eq!(fs::read(a.path().join(MANIFEST)).unwrap(), fs::read(b.path().join(MANIFEST)).unwrap());
    }

    #[test]
    fn mixed_census_within_one() {
        for (count, ratio) in [(10, 0.5), (7, 0.5), (20, 0.3), (9, 0.75)] {
            let mut spec = DegradationSpec::new(Mode::Mixed, 1, 32);
            spec.mixed_ratio = ratio;
            let m = Manifest::plan(&spec, count).unwrap();
            let (haze, snow) = m.census();
            assert!(haze + snow == count);
            assert!((haze as f64 - ratio * count as f64).abs() <= 1.0, "{} of {}", haze, count);
            assert!(haze > 0 && snow > 0);
        }
    }

    #[test]
    fn manifest_text_round_trip_and_errors() {
        let m = Manifest::plan(&DegradationSpec::new(Mode::Snow, 2, 64), 3).unwrap();
        let text = m.to_text();
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert!(text.lines().nth(2).unwrap() == "id\tmode\tseed\tdegraded\tclean");
        assert!(Manifest::parse("nonsense").is_err());
        let broken = text.replace("\tsnow\t", "\tfog\t");
        assert!(Manifest::parse(&broken).is_err());
        let err = Manifest::read(Path::new("/definitely/missing")).unwrap_err();
        assert!(err.to_string().contains("/definitely/missing"));
    }

    #[test]
    fn validation_split_is_one_in_five() {
        let m = Manifest::plan(&DegradationSpec::new(Mode::Haze, 0, 32), 80).unwrap();
        let val = m.entries.iter().filter(|e| e.is_validation()).count();
        assert_eq!(val, 16);
    }

    #[test]
    fn load_splits_and_quantises() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(&DegradationSpec::new(Mode::Haze, 0, 32), 10, dir.path()).unwrap();
        let set = PairSet::<f32>::load(dir.path()).unwrap();
        assert_eq!((set.train.len(), set.val.len()), (8, 2));
        let (deg, _, _) = render_pair::<f64>(&set.manifest.spec, Mode::Haze, set.val[0].seed).unwrap();
        assert!(deg.cast::<f32>().max_abs_diff(&set.val[0].degraded) <= 1.0 / 510.0 + 1e-6);
    }
}
