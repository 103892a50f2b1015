//! Image files (binary PPM and PNG) and the metrics CSV.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use super::binio::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::render::Image;

/// Binary `P6` with maxval 255.
pub fn ppm_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &ppm_bytes(img))
}

fn ppm_token(data: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&data[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(start as u64, "expected a decimal number in PPM header"))
}

pub fn parse_ppm(data: &[u8]) -> Result<Image> {
    if data.len() < 2 || &data[..2] != b"P6" {
        return Err(Error::format(0, "not a binary PPM (P6)"));
    }
    let mut pos = 2;
    let w = ppm_token(data, &mut pos)?;
    let h = ppm_token(data, &mut pos)?;
    let max = ppm_token(data, &mut pos)?;
    if max != 255 {
        return Err(Error::format(pos as u64, format!("unsupported maxval {max}")));
    }
    pos += 1;
    let need = 3 * w * h;
    if data.len() < pos + need {
        return Err(Error::format(pos as u64, format!("pixel data truncated: need {need} bytes")));
    }
    let px = data[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_data(w, h, px)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    parse_ppm(&read_file(path)?)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8())
        .ok_or_else(|| Error::Image("buffer size does not match dimensions".into()))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Writes PPM or PNG depending on the extension.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, img),
        _ => write_ppm(path, img),
    }
}

pub const METRICS_HEADER: &str = "step,psnr,ssim,l1,loss";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub loss: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.psnr, self.ssim, self.l1, self.loss)
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Config(format!("{}: malformed metrics line {}", path.display(), i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(MetricsRow { step: f[0].parse().map_err(|_| bad())?, psnr: num(f[1])?, ssim: num(f[2])?, l1: num(f[3])?, loss: num(f[4])? });
    }
    Ok(out)
}
