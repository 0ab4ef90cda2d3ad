//! Results bundle: metrics.csv with a fixed column order, summary.json,
//! PGM image I/O, and the resolved-config snapshot. All output is
//! byte-deterministic for a given seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::MetricsRecord;

pub const CSV_HEADER: &str = "epoch,split,loss_total,loss_class,loss_index,loss_recon,loss_kl,acc_class,acc_index_top1,class_from_index_top1,class_from_index_top5,class_consistency_top1,class_consistency_top5,lr";

fn cell(v: Option<f32>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.split,
            cell(r.loss_total),
            cell(r.loss_class),
            cell(r.loss_index),
            cell(r.loss_recon),
            cell(r.loss_kl),
            cell(r.acc_class),
            cell(r.acc_index_top1),
            cell(r.class_from_index_top1),
            cell(r.class_from_index_top5),
            cell(r.class_consistency_top1),
            cell(r.class_consistency_top5),
            r.lr,
        );
    }
    out
}

pub fn write_metrics_csv(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(records))?;
    Ok(())
}

pub fn write_summary(dir: &Path, summary: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

pub fn write_config_snapshot(dir: &Path, experiment: &str, snapshot: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = format!("# provnet {experiment}\n{snapshot}");
    fs::write(dir.join("config.resolved.txt"), text)?;
    Ok(())
}

/// Binary PGM (P5), maxval 255. Input values are clamped to [0,1].
pub fn write_pgm(path: &Path, image: &[f32], h: usize, w: usize) -> Result<()> {
    if image.len() != h * w {
        return Err(Error::Dim(format!(
            "pgm: {}x{} needs {} pixels, got {}",
            h,
            w,
            h * w,
            image.len()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a 28×28 grayscale image: PGM (P5) or an IDX image file (first
/// image). Returns pixels in [0,1].
pub fn read_image_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(b"P5") {
        return parse_pgm(&bytes);
    }
    if bytes.len() >= 16 && u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == 0x0000_0803 {
        let h = u32::from_be_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let w = u32::from_be_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
        if bytes.len() < 16 + h * w {
            return Err(Error::Data("IDX image file truncated".into()));
        }
        let data: Vec<f32> = bytes[16..16 + h * w].iter().map(|&b| b as f32 / 255.0).collect();
        return Ok(Tensor::from_vec(&[1, h, w], data));
    }
    Err(Error::Data(format!(
        "{}: neither PGM (P5) nor IDX image data",
        path.display()
    )))
}

fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    // header tokens: "P5", width, height, maxval; '#' comments allowed
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
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
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens.len() < 4 || tokens[0] != "P5" {
        return Err(Error::Data("malformed PGM header".into()));
    }
    let w: usize = tokens[1].parse().map_err(|_| Error::Data("bad PGM width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| Error::Data("bad PGM height".into()))?;
    let maxval: usize = tokens[3].parse().map_err(|_| Error::Data("bad PGM maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(Error::Data("PGM pixel data truncated".into()));
    }
    let data: Vec<f32> = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Ok(Tensor::from_vec(&[1, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Split;

    #[test]
    fn csv_fixed_columns_and_empty_cells() {
        let mut rec = MetricsRecord::empty(3, Split::Test, 0.002);
        rec.acc_class = Some(0.5);
        let text = metrics_csv(&[rec]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert!(row.starts_with("3,test,,,,,,0.5,"));
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = std::env::temp_dir().join(format!("pgm-test-{}", std::process::id()));
        let path = dir.join("img.pgm");
        let img: Vec<f32> = (0..784).map(|i| (i % 256) as f32 / 255.0).collect();
        write_pgm(&path, &img, 28, 28).unwrap();
        let back = read_image_file(&path).unwrap();
        assert_eq!(back.shape(), &[1, 28, 28]);
        for (a, b) in back.data().iter().zip(img.iter()) {
            assert!((a - b).abs() < 1.0 / 254.0);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
