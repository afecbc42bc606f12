//! RGB images and class-index masks with PPM (P6) / PGM (P5) I/O,
//! bilinear resampling, and cropping.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// RGB interleaved, row-major.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    /// One class index per pixel.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (magic, w, h, maxval, payload) = parse_pnm_header(bytes)?;
        if magic != "P6" {
            return Err(Error::Format(format!("expected P6, got {magic}")));
        }
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        let expected = w * h * 3;
        if payload.len() < expected {
            return Err(Error::Format("truncated PPM payload".into()));
        }
        Ok(Image {
            width: w,
            height: h,
            data: payload[..expected].to_vec(),
        })
    }

    pub fn save_ppm(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn load_ppm(path: &std::path::Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }

    /// Bilinear resample with pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, self.height as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, self.width as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let p00 = self.get(x0, y0)[c] as f64;
                    let p01 = self.get(x1, y0)[c] as f64;
                    let p10 = self.get(x0, y1)[c] as f64;
                    let p11 = self.get(x1, y1)[c] as f64;
                    let v = p00 * (1.0 - wx) * (1.0 - wy)
                        + p01 * wx * (1.0 - wy)
                        + p10 * (1.0 - wx) * wy
                        + p11 * wx * wy;
                    rgb[c] = v.round().clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, rgb);
            }
        }
        out
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Image> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::Input(format!(
                "crop {x},{y} {width}x{height} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Image::new(width, height);
        for row in 0..height {
            let src = ((y + row) * self.width + x) * 3;
            let dst = row * width * 3;
            out.data[dst..dst + width * 3].copy_from_slice(&self.data[src..src + width * 3]);
        }
        Ok(out)
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (magic, w, h, maxval, payload) = parse_pnm_header(bytes)?;
        if magic != "P5" {
            return Err(Error::Format(format!("expected P5, got {magic}")));
        }
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        let expected = w * h;
        if payload.len() < expected {
            return Err(Error::Format("truncated PGM payload".into()));
        }
        Ok(Mask {
            width: w,
            height: h,
            data: payload[..expected].to_vec(),
        })
    }

    pub fn save_pgm(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }

    pub fn load_pgm(path: &std::path::Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }
}

/// Parse a binary PNM header: magic, dimensions, maxval, then the payload
/// after a single whitespace byte. `#` comments are allowed in the header.
fn parse_pnm_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, &[u8])> {
    let mut pos = 0;
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace before payload
    let w: usize = fields[1]
        .parse()
        .map_err(|_| Error::Format(format!("bad width {:?}", fields[1])))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| Error::Format(format!("bad height {:?}", fields[2])))?;
    let maxval: usize = fields[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad maxval {:?}", fields[3])))?;
    Ok((fields[0].clone(), w, h, maxval, &bytes[pos.min(bytes.len())..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::new(3, 2);
        img.set(0, 0, [255, 0, 0]);
        img.set(2, 1, [0, 128, 7]);
        let back = Image::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_round_trip() {
        let mut m = Mask::new(2, 2);
        m.set(1, 1, 3);
        assert_eq!(Mask::from_pgm(&m.to_pgm()).unwrap(), m);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let mut img = Image::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.set(x, y, [100, 150, 200]);
            }
        }
        let up = img.resize_bilinear(9, 7);
        for y in 0..7 {
            for x in 0..9 {
                assert_eq!(up.get(x, y), [100, 150, 200]);
            }
        }
    }

    #[test]
    fn crop_bounds_checked() {
        let img = Image::new(4, 4);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert_eq!(img.crop(1, 1, 2, 2).unwrap().width, 2);
    }

    #[test]
    fn rejects_wrong_magic() {
        let pgm = Mask::new(2, 2).to_pgm();
        assert!(Image::from_ppm(&pgm).is_err());
    }
}
