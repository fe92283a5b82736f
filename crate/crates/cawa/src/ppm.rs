//! Binary PPM (P6, 8-bit) image reading and writing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::render::Vec3;

/// Row-major rgb image with channels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<Vec3>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<Vec3>) -> Result<Self> {
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(Error::Mismatch(format!(
                "pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn pixel(&self, x: u32, y: u32) -> &Vec3 {
        &self.pixels[(y * self.width + x) as usize]
    }
}

/// Rounds a unit-range channel to its 8-bit code.
pub fn to_u8(channel: f64) -> u8 {
    (channel.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a P6 maxval-255 file.
pub fn save_ppm(path: &Path, image: &Image) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| w.write_all(buf).map_err(|e| Error::io(path, e));
    write(format!("P6\n{} {}\n255\n", image.width, image.height).as_bytes())?;
    for p in &image.pixels {
        write(&[to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a P6 maxval-255 file. Header tokens may be separated by any
/// whitespace or `#` comments per the format.
pub fn load_ppm(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        let mut token = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
            match byte[0] {
                b'#' => {
                    let mut comment = Vec::new();
                    r.read_until(b'\n', &mut comment).map_err(|e| Error::io(path, e))?;
                }
                b if b.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        break;
                    }
                }
                b => token.push(b),
            }
        }
        tokens.push(String::from_utf8_lossy(&token).into_owned());
    }

    if tokens[0] != "P6" {
        return Err(Error::Format(format!("{}: expected P6, got {}", path.display(), tokens[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<u32>()
            .map_err(|_| Error::Format(format!("{}: bad {what} {s:?}", path.display())))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("{}: only maxval 255 supported", path.display())));
    }

    let mut raw = vec![0u8; (width as usize) * (height as usize) * 3];
    r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let pixels = raw
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Image::new(width, height, pixels)
}
