//! File formats: binary PPM images, box annotations, palettes, metrics,
//! loss traces and tensor bundles (weights and checkpoints).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::colorspace::Palette;
use crate::error::{Error, Result};
use crate::geometry::{BBox, GtBox};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major `RGBRGB...`, `3 * width * height` bytes.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != 3 * width * height {
            return Err(Error::arg(format!(
                "{width}x{height} image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Quantize a `[3, H, W]` tensor in `[0, 1]` (values are clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::arg(format!("expected [3, H, W] tensor, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let d = t.data();
        let mut pixels = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for c in 0..3 {
                pixels.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Image::new(w, h, pixels)
    }

    /// `[3, H, W]` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = f64::from(self.pixels[3 * p + c]) / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("consistent image size")
    }
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let err = |offset: usize, message: &str| Error::ImageFormat {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal number in header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(start, "header number out of range"))?;
        if i < 2 && *field == 0 {
            return Err(err(start, "zero image dimension"));
        }
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, &format!("unsupported max value {maxval} (only 255)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected single whitespace after header")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| err(pos, "image dimensions overflow"))?;
    let have = bytes.len() - pos;
    if have < need {
        return Err(err(
            bytes.len(),
            &format!("truncated pixel data: need {need} bytes, found {have}"),
        ));
    }
    Image::new(width, height, bytes[pos..pos + need].to_vec())
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

/// One `class x1 y1 x2 y2` line per box.
pub fn format_annotations(boxes: &[GtBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            b.class_id, b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2
        );
    }
    s
}

pub fn parse_annotations(text: &str) -> Result<Vec<GtBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected `class x1 y1 x2 y2`, got {line:?}")));
        }
        let class_id = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad class id {:?}", fields[0])))?;
        let mut c = [0.0; 4];
        for (v, f) in c.iter_mut().zip(&fields[1..]) {
            *v = f
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| bad(format!("bad coordinate {f:?}")))?;
        }
        let bbox = BBox::new(c[0], c[1], c[2], c[3]);
        if !bbox.is_valid() {
            return Err(bad(format!("degenerate box {line:?}")));
        }
        boxes.push(GtBox { class_id, bbox });
    }
    Ok(boxes)
}

pub fn save_palette(p: &Palette, path: &Path) -> Result<()> {
    fs::write(path, p.to_text())?;
    Ok(())
}

pub fn load_palette(path: &Path) -> Result<Palette> {
    Palette::parse(&fs::read_to_string(path)?)
}

/// Ordered `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub entries: Vec<(String, String)>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Metrics::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }
}

pub const LOSS_CSV_HEADER: &str = "step,l_adv,l_distill,l_total,mean_obj";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_adv: f64,
    pub l_distill: f64,
    pub l_total: f64,
    pub mean_obj: f64,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.l_adv, self.l_distill, self.l_total, self.mean_obj
        )
    }
}

pub fn format_loss_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOSS_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {LOSS_CSV_HEADER:?}, got {h:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty loss CSV".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let step = f[0]
            .parse()
            .map_err(|_| bad(format!("bad step {:?}", f[0])))?;
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| bad(format!("bad number {s:?}")))
        };
        out.push(LossRecord {
            step,
            l_adv: num(f[1])?,
            l_distill: num(f[2])?,
            l_total: num(f[3])?,
            mean_obj: num(f[4])?,
        });
    }
    Ok(out)
}

const BUNDLE_MAGIC: &str = "STPB";
pub const BUNDLE_VERSION: u32 = 1;

/// Named tensors plus string metadata. Text header, then little-endian f64
/// payload in tensor order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Self::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value {v:?} for {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        Ok(self.tensors.remove(i).1)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut head = format!("{BUNDLE_MAGIC} {BUNDLE_VERSION} {}\n", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(head, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            let _ = writeln!(head, "tensor {name} {}", dims.join(" "));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<&str> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("header is not UTF-8".into()))?;
            *pos += end + 1;
            Ok(line)
        };
        let first = next_line(&mut pos)?;
        let mut parts = first.splitn(3, ' ');
        if parts.next() != Some(BUNDLE_MAGIC) {
            return Err(bad("not a tensor bundle".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version".into()))?;
        if version != BUNDLE_VERSION {
            return Err(bad(format!(
                "unsupported bundle version {version} (expected {BUNDLE_VERSION})"
            )));
        }
        let mut b = Bundle::new(parts.next().unwrap_or(""));
        let mut shapes = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "data" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                b.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut it = rest.split(' ');
                let name = it.next().unwrap_or_default().to_string();
                let dims: Vec<usize> = it
                    .filter(|d| !d.is_empty())
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in {line:?}"))))
                    .collect::<Result<_>>()?;
                shapes.push((name, dims));
            } else {
                return Err(bad(format!("unexpected header line {line:?}")));
            }
        }
        for (name, dims) in shapes {
            let n: usize = dims.iter().product();
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(bad(format!("truncated payload in tensor {name:?}")));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos = end;
            let t = Tensor::new(dims, data).map_err(|e| bad(format!("tensor {name:?}: {e}")))?;
            b.tensors.push((name, t));
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Bundle::decode(&fs::read(path)?)
    }

    /// Decode and check the kind tag.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let b = Bundle::load(path)?;
        if b.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} bundle, expected {kind:?}",
                path.display(),
                b.kind
            )));
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Image::new(3, 3, (0..27).map(|i| (i * 37 % 256) as u8).collect()).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert_eq!(decode_ppm(&bytes).unwrap().pixels, vec![1, 2, 3]);
    }

    #[test]
    fn ppm_rejects_bad_input() {
        let img = Image::new(2, 2, vec![9; 12]).unwrap();
        let bytes = encode_ppm(&img);
        let e = decode_ppm(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(e, Error::ImageFormat { .. }), "{e}");
        let e = decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(e.to_string().contains("65535"), "{e}");
        let e = decode_ppm(b"P3\n1 1\n255\n").unwrap_err();
        assert!(matches!(e, Error::ImageFormat { offset: 0, .. }));
        let e = decode_ppm(b"P6\n1 x\n").unwrap_err();
        assert!(matches!(e, Error::ImageFormat { offset: 5, .. }), "{e}");
    }

    #[test]
    fn tensor_image_round_trip() {
        let img = Image::new(2, 1, vec![0, 128, 255, 7, 8, 9]).unwrap();
        assert_eq!(Image::from_tensor(&img.to_tensor()).unwrap(), img);
    }

    #[test]
    fn annotations_round_trip() {
        let boxes = vec![
            GtBox {
                class_id: 0,
                bbox: BBox::new(1.5, 2.0, 10.25, 30.0),
            },
            GtBox {
                class_id: 1,
                bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
            },
        ];
        assert_eq!(parse_annotations(&format_annotations(&boxes)).unwrap(), boxes);
        let e = parse_annotations("0 1 2 3 4\n0 1 2 x 4\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn loss_csv_round_trip_and_errors() {
        let rows = vec![LossRecord {
            step: 3,
            l_adv: 0.1,
            l_distill: 2.5e-7,
            l_total: 0.10000025,
            mean_obj: 0.4,
        }];
        assert_eq!(parse_loss_csv(&format_loss_csv(&rows)).unwrap(), rows);
        let e = parse_loss_csv(&format!("{LOSS_CSV_HEADER}\n1,2,3,4,5\n1,2,3\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn metrics_round_trip() {
        let mut m = Metrics::new();
        m.set("asr", 0.5);
        m.set("ssim", 0.25);
        m.set("asr", 0.75);
        let p = Metrics::parse(&m.to_text()).unwrap();
        assert_eq!(p, m);
        assert_eq!(p.get_f64("asr"), Some(0.75));
    }

    #[test]
    fn bundle_round_trip_and_corruption() {
        let mut b = Bundle::new("test");
        b.set_meta("step", 17);
        b.push("w", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        b.push("s", Tensor::scalar(0.1));
        let bytes = b.encode();
        let d = Bundle::decode(&bytes).unwrap();
        assert_eq!(d, b);
        assert_eq!(d.meta_parse::<usize>("step").unwrap(), 17);
        let e = Bundle::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        let mut v2 = bytes.clone();
        v2[5] = b'9';
        assert!(Bundle::decode(&v2).unwrap_err().to_string().contains("version"));
    }
}
