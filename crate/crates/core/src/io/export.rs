//! CSV tables and 8-bit grayscale PGM (P5) images.

use std::path::Path;

use crate::analysis::{AngleLandscape, SweepGrid};
use crate::error::{Error, Result};

/// CSV text with a header row; fields must not contain `,`, quotes or newlines.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let bad = |s: &str| s.contains([',', '"', '\n', '\r']);
    if let Some(h) = header.iter().find(|h| bad(h)) {
        return Err(Error::InvalidArgument(format!(
            "CSV header field {h:?} needs quoting"
        )));
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::InvalidArgument(format!(
                "CSV row has {} fields, header has {}",
                r.len(),
                header.len()
            )));
        }
        if let Some(f) = r.iter().find(|f| bad(f)) {
            return Err(Error::InvalidArgument(format!(
                "CSV field {f:?} needs quoting"
            )));
        }
        out += &r.join(",");
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    Ok(std::fs::write(path, csv_string(header, rows)?)?)
}

/// Minimal CSV reader for files written by [`write_csv`].
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty CSV".into()))?
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let r: Vec<String> = l.split(',').map(String::from).collect();
            if r.len() == header.len() {
                Ok(r)
            } else {
                Err(Error::InvalidArgument(format!(
                    "CSV row {l:?} has {} fields",
                    r.len()
                )))
            }
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Maps `[0, 1]` to `0..=255`, clamping outside values.
pub fn to_gray(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 || pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "{} pixels do not fill a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| to_gray(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    Ok(std::fs::write(path, pgm_bytes(width, height, pixels)?)?)
}

/// Parses a P5 image with maxval 255; returns `(width, height, bytes)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::InvalidArgument(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit P5 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() != w * h {
        return Err(bad("pixel count does not match size"));
    }
    Ok((w, h, data.to_vec()))
}

/// Tiles a sweep into one image: one row of tiles per anchor, one column per step.
pub fn sweep_image(
    grid: &SweepGrid,
    tile_rows: usize,
    tile_cols: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    let d = grid.outputs.cols();
    if tile_rows * tile_cols != d {
        return Err(Error::DimensionMismatch {
            what: "tile size",
            expected: d,
            got: tile_rows * tile_cols,
        });
    }
    let (na, ns) = (grid.n_anchors(), grid.steps());
    let (w, h) = (ns * tile_cols, na * tile_rows);
    let mut px = vec![0.0; w * h];
    for a in 0..na {
        for s in 0..ns {
            let cell = grid.cell(a, s);
            for r in 0..tile_rows {
                let dst = (a * tile_rows + r) * w + s * tile_cols;
                px[dst..dst + tile_cols].copy_from_slice(&cell[r * tile_cols..(r + 1) * tile_cols]);
            }
        }
    }
    Ok((w, h, px))
}

/// One row per cell: anchor, step, offset, then each class probability.
pub fn sweep_csv(grid: &SweepGrid) -> Result<String> {
    let m = grid.probs.cols();
    let names: Vec<String> = (0..m).map(|c| format!("p{c}")).collect();
    let mut header = vec!["anchor", "step", "offset"];
    header.extend(names.iter().map(String::as_str));
    let mut rows = Vec::new();
    for a in 0..grid.n_anchors() {
        for (s, v) in grid.values.iter().enumerate() {
            let mut r = vec![a.to_string(), s.to_string(), v.to_string()];
            r.extend(grid.cell_probs(a, s).iter().map(|p| p.to_string()));
            rows.push(r);
        }
    }
    csv_string(&header, &rows)
}

/// Long-format heatmap: one row per cell with every variant, `D` and `H(Y)` when present.
pub fn landscape_csv(l: &AngleLandscape) -> Result<String> {
    let mut header: Vec<String> = vec!["theta1".into(), "theta2".into()];
    header.extend(
        l.causal
            .iter()
            .map(|(v, _)| format!("c_{}", v.name().replace('-', "_"))),
    );
    header.push("fidelity".into());
    if l.output_entropy.is_some() {
        header.push("entropy_y".into());
    }
    let n = l.res();
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n * n {
        let mut r = vec![l.angles[i / n].to_string(), l.angles[i % n].to_string()];
        r.extend(l.causal.iter().map(|(_, c)| c[i].to_string()));
        r.push(l.fidelity[i].to_string());
        if let Some(h) = &l.output_entropy {
            r.push(h[i].to_string());
        }
        rows.push(r);
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_string(&h, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_validation() {
        let rows = vec![
            vec!["1".to_string(), "0.25".to_string()],
            vec!["2".into(), "-1e-7".into()],
        ];
        let s = csv_string(&["a", "b"], &rows).unwrap();
        assert_eq!(s, "a,b\n1,0.25\n2,-1e-7\n");
        assert_eq!(
            read_csv(&s).unwrap(),
            (vec!["a".to_string(), "b".to_string()], rows)
        );
        assert!(csv_string(&["a"], &[vec!["1,2".into()]]).is_err());
        assert!(csv_string(&["a", "b"], &[vec!["1".into()]]).is_err());
    }

    #[test]
    fn pgm_round_trip_and_endpoints() {
        let px = [0.0, 1.0, 0.5, 2.0, -1.0, f64::NAN];
        let b = pgm_bytes(3, 2, &px).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        let (w, h, data) = parse_pgm(&b).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(data, vec![0, 255, 128, 255, 0, 0]);
        assert!(pgm_bytes(3, 3, &px).is_err());
        assert!(parse_pgm(b"P2\n1 1\n255\n\x00").is_err());
    }
}
