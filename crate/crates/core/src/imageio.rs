//! Binary portable pixmap (P6, maxval 255) I/O and image grids.
//!
//! Pixel values in `[-1, 1]` map to bytes by `round((v + 1) * 127.5)`,
//! rounding half away from zero and clamping to `0..=255`; reading applies
//! the inverse affine map `b / 127.5 - 1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::Image;

pub fn to_byte(v: f32) -> u8 {
    let scaled = (f64::from(v) + 1.0) * 127.5;
    // f64::round rounds half away from zero
    scaled.round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f32 {
    (f64::from(b) / 127.5 - 1.0) as f32
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let s = image.size();
    let mut out = format!("P6\n{s} {s}\n255\n").into_bytes();
    out.reserve(3 * s * s);
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                out.push(to_byte(image.get(c, y, x)));
            }
        }
    }
    out
}

/// Reads a header token, skipping whitespace and `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated pixmap header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad pixmap {what}: {:?}", String::from_utf8_lossy(t))))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Format(format!("expected P6 magic, found {:?}", String::from_utf8_lossy(magic))));
    }
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 is supported, found {maxval}")));
    }
    if width != height || width == 0 {
        return Err(Error::Format(format!("expected a non-empty square image, found {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing separator after pixmap header".into()));
    }
    pos += 1;
    let raster = &bytes[pos..];
    let s = width;
    if raster.len() != 3 * s * s {
        return Err(Error::Format(format!("expected {} raster bytes, found {}", 3 * s * s, raster.len())));
    }
    let mut data = vec![0f32; 3 * s * s];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * s * s + i] = from_byte(px[c]);
        }
    }
    Image::new(s, data)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

/// Rows of equally sized tiles with optional captions.
#[derive(Debug, Clone, Default)]
pub struct ImageGrid {
    rows: Vec<Vec<Image>>,
    pub row_captions: Vec<String>,
    pub col_captions: Vec<String>,
}

const GAP: usize = 2;

impl ImageGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_row(&mut self, caption: impl Into<String>, tiles: Vec<Image>) -> Result<()> {
        if let Some(t) = self.tile_size() {
            if tiles.iter().any(|i| i.size() != t) {
                return Err(Error::Dimension(format!("grid tiles must all be {t}x{t}")));
            }
        } else if let Some(first) = tiles.first() {
            if tiles.iter().any(|i| i.size() != first.size()) {
                return Err(Error::Dimension("grid tiles must share one size".into()));
            }
        }
        self.rows.push(tiles);
        self.row_captions.push(caption.into());
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<Image>] {
        &self.rows
    }

    fn tile_size(&self) -> Option<usize> {
        self.rows.iter().flatten().next().map(Image::size)
    }

    /// Composites the grid onto a square canvas with a mid-gray gap between
    /// tiles; missing tiles stay gray.
    pub fn compose(&self) -> Result<Image> {
        let t = self.tile_size().ok_or_else(|| Error::Argument("empty image grid".into()))?;
        let cols = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let side = (cols.max(self.rows.len())) * (t + GAP) + GAP;
        let mut canvas = Image::filled(side, 0.0);
        let plane = side * side;
        for (r, row) in self.rows.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                let oy = GAP + r * (t + GAP);
                let ox = GAP + c * (t + GAP);
                for ch in 0..3 {
                    for y in 0..t {
                        for x in 0..t {
                            canvas.data_mut()[ch * plane + (oy + y) * side + ox + x] = tile.get(ch, y, x);
                        }
                    }
                }
            }
        }
        Ok(canvas)
    }

    pub fn captions_text(&self) -> String {
        let mut out = String::new();
        if !self.col_captions.is_empty() {
            out.push_str(&format!("columns\t{}\n", self.col_captions.join("\t")));
        }
        for (i, c) in self.row_captions.iter().enumerate() {
            out.push_str(&format!("row{i}\t{c}\n"));
        }
        out
    }

    /// Writes `path` and a `.txt` caption file next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_image(path, &self.compose()?)?;
        let captions = path.with_extension("txt");
        fs::write(&captions, self.captions_text()).map_err(|e| Error::io(&captions, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_maps_to_mid_gray() {
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(3.0), 255);
        let bytes = encode_ppm(&Image::filled(2, 0.0));
        assert_eq!(&bytes[..11], b"P6\n2 2\n255\n");
        assert!(bytes[11..].iter().all(|&b| b == 128));
    }

    #[test]
    fn rejects_other_formats() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b""), Err(Error::Format(_))));
        let ok = decode_ppm(b"P6 # comment\n1 1\n255\n\x80\x80\x80").unwrap();
        assert_eq!(ok.data(), &[from_byte(128); 3]);
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = read_image(Path::new("/nonexistent/x.ppm")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn grid_composes_and_writes() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = ImageGrid::new();
        g.col_captions = vec!["a".into(), "b".into()];
        g.push_row("first", vec![Image::filled(4, 1.0), Image::filled(4, -1.0)]).unwrap();
        assert!(g.push_row("bad", vec![Image::filled(5, 0.0)]).is_err());
        let img = g.compose().unwrap();
        assert_eq!(img.size(), 2 * 6 + 2);
        assert_eq!(img.get(0, 2, 2), 1.0);
        assert_eq!(img.get(0, 2, 8), -1.0);
        let path = dir.path().join("grid.ppm");
        g.write(&path).unwrap();
        assert_eq!(read_image(&path).unwrap().size(), 14);
        assert!(std::fs::read_to_string(dir.path().join("grid.txt")).unwrap().contains("row0\tfirst"));
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(values in proptest::collection::vec(-1.0f32..=1.0, 27)) {
            let image = Image::new(3, values).unwrap();
            let back = decode_ppm(&encode_ppm(&image)).unwrap();
            for (a, b) in image.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
            prop_assert_eq!(encode_ppm(&back), encode_ppm(&image));
        }
    }
}
