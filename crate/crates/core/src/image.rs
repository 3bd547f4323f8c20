//! Binary PPM (P6) / PGM (P5) codec and the colour ramp used for gate maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `round(v·255)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    /// From a `[1, 3, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::shape("Rgb8::from_tensor", format!("expected [1, 3, H, W], got {:?}", t.shape())));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3 {
                data.push(quantize(t.data()[ch * plane + i].as_f64()));
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// `[1, 3, H, W]` with values `byte / 255`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[1, 3, self.height, self.width], |k| {
            let (ch, i) = (k / plane, k % plane);
            T::lit(self.data[3 * i + ch] as f64 / 255.0)
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader { bytes, pos: 0 };
        let magic = r.token()?;
        if magic != "P6" {
            return Err(r.error(0, format!("expected magic P6, found {:?}", magic)));
        }
        let width = r.number("width")?;
        let height = r.number("height")?;
        r.skip_space_and_comments();
        let maxval_at = r.pos;
        let maxval = r.number("maxval")?;
        if maxval != 255 {
            return Err(r.error(maxval_at, format!("only maxval 255 is supported, found {}", maxval)));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(r.pos) {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            _ => return Err(r.error(r.pos, "missing whitespace after maxval")),
        }
        let need = width * height * 3;
        let raster = &bytes[r.pos..];
        if raster.len() < need {
            return Err(r.error(
                bytes.len(),
                format!("raster truncated: need {} bytes, have {}", need, raster.len()),
            ));
        }
        if width == 0 || height == 0 {
            return Err(r.error(0, "zero image dimension"));
        }
        Ok(Self {
            width,
            height,
            data: raster[..need].to_vec(),
        })
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn error(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "PPM header",
            offset,
            detail: detail.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(start, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let at = self.pos;
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| self.error(at, format!("{} is not a number: {:?}", what, tok)))
    }
}

/// Writes through a sibling temporary file and renames, so a failed write
/// never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{}.tmp{}", name, std::process::id()));
    let result = (|| {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = Rgb8::decode(&bytes).map_err(|e| Error::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    })?;
    Ok(img.to_tensor())
}

pub fn write_ppm<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    write_atomic(path, &Rgb8::from_tensor(image)?.encode())
}

/// Binary 8-bit greyscale of a `[1, 1, H, W]` map.
pub fn encode_pgm<T: Real>(map: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = map.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape("encode_pgm", format!("expected [1, 1, H, W], got {:?}", map.shape())));
    }
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(map.data().iter().map(|v| quantize(v.as_f64())));
    Ok(out)
}

/// 256-entry jet ramp: blue through cyan, yellow to red.
pub static JET: [[u8; 3]; 256] = build_jet();

const fn ramp(x: f64) -> u8 {
    // clamp(1.5 − |4x − c|) scaled to a byte, written for const evaluation
    let v = if x < 0.0 { 0.0 } else if x > 1.0 { 1.0 } else { x };
    let scaled = v * 255.0 + 0.5;
    scaled as u8
}

const fn channel(x: f64, centre: f64) -> u8 {
    let d = 4.0 * x - centre;
    let a = if d < 0.0 { -d } else { d };
    ramp(1.5 - a)
}

const fn build_jet() -> [[u8; 3]; 256] {
    let mut t = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let x = i as f64 / 255.0;
        t[i] = [channel(x, 3.0), channel(x, 2.0), channel(x, 1.0)];
        i += 1;
    }
    t
}

/// Colour-maps a `[1, 1, H, W]` map in `[0, 1]` to RGB.
pub fn colorize_jet<T: Real>(map: &Tensor<T>) -> Result<Rgb8> {
    let [n, c, h, w] = map.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape("colorize_jet", format!("expected [1, 1, H, W], got {:?}", map.shape())));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for v in map.data() {
        data.extend_from_slice(&JET[quantize(v.as_f64()) as usize]);
    }
    Ok(Rgb8 {
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_pixel_bytes() {
        let t = Tensor::<f32>::full(&[1, 3, 1, 1], 1.0);
        let bytes = Rgb8::from_tensor(&t).unwrap().encode();
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 255, 255]);
        assert!(bytes.starts_with(b"P6\n1 1\n255\n"));
    }

    #[test]
    fn decode_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = Rgb8::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let cases: &[(&[u8], usize)] = &[
            (b"P5\n1 1\n255\n\0", 0),
            (b"P6\n1 x\n255\n\0\0\0", 5),
            (b"P6\n1 1\n65535\n\0\0\0", 7),
            (b"P6\n2 2\n255\n\0\0\0", 14),
        ];
        for (bytes, offset) in cases {
            match Rgb8::decode(bytes) {
                Err(Error::Format { offset: o, .. }) => assert_eq!(o, *offset, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("expected format error, got {:?}", other),
            }
        }
    }

    #[test]
    fn quantization_error_bounded() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = Tensor::<f64>::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
            let back: Tensor<f64> = Rgb8::from_tensor(&t).unwrap().to_tensor();
            assert!(t.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn file_round_trip_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::<f32>::rand_uniform(&[1, 3, 4, 8], 0.0, 1.0, &mut r);
        write_ppm(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back: Tensor<f32> = read_ppm(&path).unwrap();
        write_ppm(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
        write_ppm(&dir.path().join("new/b.ppm"), &t).unwrap();
        assert_eq!(fs::read(dir.path().join("new/b.ppm")).unwrap(), bytes);
        // a regular file where a directory is needed
        assert!(write_ppm(&path.join("c.ppm"), &t).is_err());
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn jet_endpoints_and_pgm() {
        assert_eq!(JET[0], [0, 0, 128]);
        assert_eq!(JET[255], [128, 0, 0]);
        assert_eq!(JET[128][1], 255);
        let map = Tensor::<f32>::from_fn(&[1, 1, 2, 2], |i| i as f32 / 3.0);
        let pgm = encode_pgm(&map).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 85, 170, 255]);
        assert_eq!(colorize_jet(&map).unwrap().data.len(), 12);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(w in 1usize..6, h in 1usize..6, seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..w * h * 3).map(|_| rand::Rng::random(&mut r)).collect();
            let img = Rgb8 { width: w, height: h, data };
            let back = Rgb8::decode(&img.encode()).unwrap();
            prop_assert_eq!(&back, &img);
            let t: Tensor<f32> = img.to_tensor();
            prop_assert_eq!(Rgb8::from_tensor(&t).unwrap(), img);
        }
    }
}
