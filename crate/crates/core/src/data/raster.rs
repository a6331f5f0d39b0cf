use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const RASTER_MAGIC: &[u8; 7] = b"DSMRAS1";
const ASCII_NODATA: f64 = -9999.0;
/// Refuse rasters with more cells than this.
const MAX_CELLS: usize = 1 << 31;

/// Single-band height grid in metres with a validity mask.
///
/// Invalid cells always store 0.0 so that equality is well defined.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    /// Ground sampling distance, metres per pixel.
    pub gsd: f64,
    /// Lower-left corner in map units.
    pub origin: (f64, f64),
    heights: Vec<f32>,
    mask: Vec<bool>,
}

impl Raster {
    pub fn new(width: usize, height: usize, gsd: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("empty raster {width}x{height}")));
        }
        let n = width
            .checked_mul(height)
            .filter(|&n| n <= MAX_CELLS)
            .ok_or_else(|| Error::Dimension(format!("raster {width}x{height} is too large")))?;
        Ok(Self {
            width,
            height,
            gsd,
            origin: (0.0, 0.0),
            heights: vec![0.0; n],
            mask: vec![true; n],
        })
    }

    /// Wraps heights, treating non-finite values as nodata.
    pub fn from_heights(width: usize, height: usize, gsd: f64, heights: Vec<f32>) -> Result<Self> {
        let mut r = Self::new(width, height, gsd)?;
        if heights.len() != r.heights.len() {
            return Err(Error::Dimension(format!(
                "{width}x{height} raster needs {} heights, got {}",
                r.heights.len(),
                heights.len()
            )));
        }
        for (i, h) in heights.into_iter().enumerate() {
            if h.is_finite() {
                r.heights[i] = h;
            } else {
                r.mask[i] = false;
            }
        }
        Ok(r)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        let i = self.index(row, col);
        self.mask[i].then(|| self.heights[i])
    }

    pub fn set(&mut self, row: usize, col: usize, h: f32) {
        let i = self.index(row, col);
        if h.is_finite() {
            self.heights[i] = h;
            self.mask[i] = true;
        } else {
            self.set_nodata(row, col);
        }
    }

    pub fn set_nodata(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.heights[i] = 0.0;
        self.mask[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Heights with NaN at nodata cells.
    pub fn to_nan_filled(&self) -> Vec<f32> {
        self.heights
            .iter()
            .zip(&self.mask)
            .map(|(&h, &m)| if m { h } else { f32::NAN })
            .collect()
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Raster> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Dimension(format!(
                "window {height}x{width} at ({row}, {col}) exceeds {}x{} raster",
                self.height, self.width
            )));
        }
        let mut out = Raster::new(width, height, self.gsd)?;
        for r in 0..height {
            let src = self.index(row + r, col);
            out.heights[r * width..(r + 1) * width].copy_from_slice(&self.heights[src..src + width]);
            out.mask[r * width..(r + 1) * width].copy_from_slice(&self.mask[src..src + width]);
        }
        out.origin = (
            self.origin.0 + col as f64 * self.gsd,
            self.origin.1 + (self.height - row - height) as f64 * self.gsd,
        );
        Ok(out)
    }

    /// Copies of the heights in a square window, as f32.
    pub fn window(&self, row: usize, col: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            let i = self.index(r, col);
            out.extend_from_slice(&self.heights[i..i + size]);
        }
        out
    }

    /// Like [`window`](Self::window) but with NaN at nodata cells.
    pub fn window_nan(&self, row: usize, col: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            let i = self.index(r, col);
            out.extend(
                self.heights[i..i + size]
                    .iter()
                    .zip(&self.mask[i..i + size])
                    .map(|(&h, &ok)| if ok { h } else { f32::NAN }),
            );
        }
        out
    }

    pub(crate) fn heights_mut(&mut self) -> &mut [f32] {
        &mut self.heights
    }

    pub(crate) fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }
}

/// Reads either format, chosen by the leading bytes.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RASTER_MAGIC) {
        return read_binary(&bytes, path);
    }
    let head = String::from_utf8_lossy(&bytes[..bytes.len().min(16)]).to_ascii_lowercase();
    if head.trim_start().starts_with("ncols") || head.trim_start().starts_with("nrows") {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "ASCII grid is not valid UTF-8"))?;
        return read_ascii(text, path);
    }
    Err(Error::format(path, "unknown raster magic"))
}

/// Writes an ESRI ASCII grid for `.asc` paths and the binary format otherwise.
pub fn write_raster(raster: &Raster, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("asc") => write_ascii(raster, path),
        _ => write_binary(raster, path),
    }
}

pub fn write_binary(raster: &Raster, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(27 + 4 * raster.len());
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&(raster.width as u32).to_le_bytes());
    out.extend_from_slice(&(raster.height as u32).to_le_bytes());
    out.extend_from_slice(&raster.gsd.to_le_bytes());
    for v in raster.to_nan_filled() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_binary(bytes: &[u8], path: &Path) -> Result<Raster> {
    const HEADER: usize = 7 + 4 + 4 + 8;
    if bytes.len() < HEADER {
        return Err(Error::payload(path, "header truncated"));
    }
    let width = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let gsd = f64::from_le_bytes(bytes[15..23].try_into().unwrap());
    let cells = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_CELLS)
        .ok_or_else(|| Error::format(path, format!("dimensions {width}x{height} overflow")))?;
    let payload = &bytes[HEADER..];
    if payload.len() != cells * 4 {
        return Err(Error::payload(
            path,
            format!("expected {} payload bytes, found {}", cells * 4, payload.len()),
        ));
    }
    let heights = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Raster::from_heights(width, height, gsd, heights)
}

pub fn write_ascii(raster: &Raster, path: &Path) -> Result<()> {
    let mut s = String::with_capacity(raster.len() * 8 + 128);
    s.push_str(&format!("ncols {}\n", raster.width));
    s.push_str(&format!("nrows {}\n", raster.height));
    s.push_str(&format!("xllcorner {}\n", raster.origin.0));
    s.push_str(&format!("yllcorner {}\n", raster.origin.1));
    s.push_str(&format!("cellsize {}\n", raster.gsd));
    s.push_str(&format!("NODATA_value {ASCII_NODATA}\n"));
    for r in 0..raster.height {
        let row: Vec<String> = (0..raster.width)
            .map(|c| match raster.get(r, c) {
                Some(h) => h.to_string(),
                None => ASCII_NODATA.to_string(),
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_ascii(text: &str, path: &Path) -> Result<Raster> {
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = 0.0;
    let mut yll = 0.0;
    let mut center = (false, false);
    let mut cellsize = None;
    let mut nodata = ASCII_NODATA;
    let mut values: Vec<&str> = Vec::new();

    let parse_f = |v: &str| {
        v.parse::<f64>()
            .map_err(|_| Error::format(path, format!("bad header value {v:?}")))
    };
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let Some(first) = parts.next() else { continue };
        let key = first.to_ascii_lowercase();
        let is_header = values.is_empty() && key.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
        if !is_header {
            values.push(first);
            values.extend(parts);
            continue;
        }
        let v = parts
            .next()
            .ok_or_else(|| Error::format(path, format!("header `{first}` has no value")))?;
        match key.as_str() {
            "ncols" => ncols = Some(v.parse::<usize>().map_err(|_| Error::format(path, "bad ncols"))?),
            "nrows" => nrows = Some(v.parse::<usize>().map_err(|_| Error::format(path, "bad nrows"))?),
            "xllcorner" => xll = parse_f(v)?,
            "yllcorner" => yll = parse_f(v)?,
            "xllcenter" => {
                xll = parse_f(v)?;
                center.0 = true;
            }
            "yllcenter" => {
                yll = parse_f(v)?;
                center.1 = true;
            }
            "cellsize" => cellsize = Some(parse_f(v)?),
            "nodata_value" => nodata = parse_f(v)?,
            other => return Err(Error::format(path, format!("unknown header key `{other}`"))),
        }
    }
    let (Some(w), Some(h)) = (ncols, nrows) else {
        return Err(Error::format(path, "missing ncols or nrows"));
    };
    let gsd = cellsize.ok_or_else(|| Error::format(path, "missing cellsize"))?;
    if w == 0 || h == 0 {
        return Err(Error::Dimension(format!("empty raster {w}x{h}")));
    }
    let cells = w
        .checked_mul(h)
        .filter(|&n| n <= MAX_CELLS)
        .ok_or_else(|| Error::format(path, format!("dimensions {w}x{h} overflow")))?;
    if values.len() != cells {
        return Err(Error::payload(
            path,
            format!("expected {cells} values, found {}", values.len()),
        ));
    }
    let mut heights = Vec::with_capacity(cells);
    for v in values {
        let x: f64 = v
            .parse()
            .map_err(|_| Error::payload(path, format!("bad value {v:?}")))?;
        heights.push(if x == nodata { f32::NAN } else { x as f32 });
    }
    let mut r = Raster::from_heights(w, h, gsd, heights)?;
    r.origin = (
        if center.0 { xll - 0.5 * gsd } else { xll },
        if center.1 { yll - 0.5 * gsd } else { yll },
    );
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_raster(seed: u64, w: usize, h: usize) -> Raster {
        let mut rng = SplitMix64::new(seed);
        let heights = (0..w * h)
            .map(|_| {
                if rng.uniform() < 0.1 {
                    f32::NAN
                } else {
                    rng.range(-20.0, 400.0) as f32
                }
            })
            .collect();
        Raster::from_heights(w, h, 0.1, heights).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dsmr");
        let r = random_raster(4, 13, 7);
        write_raster(&r, &p).unwrap();
        let back = read_raster(&p).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ascii_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.asc");
        let mut r = random_raster(5, 6, 9);
        r.origin = (2600000.0, 1200000.0);
        write_raster(&r, &p).unwrap();
        let back = read_raster(&p).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ascii_sentinel_clears_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.asc");
        fs::write(
            &p,
            "NCOLS 3\nNROWS 2\nXLLCORNER 0\nYLLCORNER 0\nCELLSIZE 0.5\nNODATA_value -9999\n\
             1.5 -9999 3\n4 5 -9999\n",
        )
        .unwrap();
        let r = read_raster(&p).unwrap();
        assert_eq!((r.width(), r.height()), (3, 2));
        assert_eq!(r.gsd, 0.5);
        assert_eq!(r.mask(), &[true, false, true, true, true, false]);
        assert_eq!(r.get(0, 0), Some(1.5));
        assert_eq!(r.get(1, 2), None);
    }

    #[test]
    fn zero_sized_rejected() {
        assert!(Raster::new(0, 0, 0.1).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.asc");
        fs::write(&p, "ncols 0\nnrows 0\nxllcorner 0\nyllcorner 0\ncellsize 1\n").unwrap();
        assert!(matches!(read_raster(&p), Err(Error::Dimension(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dsmr");
        fs::write(&p, b"NOTARASTER").unwrap();
        assert!(matches!(read_raster(&p), Err(Error::Format { .. })));

        let r = random_raster(1, 4, 4);
        write_binary(&r, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_raster(&p), Err(Error::Payload { .. })));

        let mut huge = RASTER_MAGIC.to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&0.1f64.to_le_bytes());
        fs::write(&p, &huge).unwrap();
        assert!(matches!(read_raster(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn ascii_short_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.asc");
        fs::write(&p, "ncols 2\nnrows 2\ncellsize 1\n1 2 3\n").unwrap();
        assert!(matches!(read_raster(&p), Err(Error::Payload { .. })));
    }

    #[test]
    fn crop_window() {
        let r = Raster::from_heights(4, 3, 1.0, (0..12).map(|v| v as f32).collect()).unwrap();
        let c = r.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.heights(), &[6.0, 7.0, 10.0, 11.0]);
        assert_eq!(r.window(0, 1, 2), vec![1.0, 2.0, 5.0, 6.0]);
        assert!(r.crop(2, 0, 2, 2).is_err());
    }
}
