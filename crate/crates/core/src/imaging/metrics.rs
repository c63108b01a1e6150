use std::io::{self, Write};

use super::{Image, ImageError, Mask};

/// PSNR reported for identical images.
pub const DEFAULT_PSNR_CAP: f64 = 100.0;

/// Errors on the 8-bit scale: pixels are multiplied by 255 before squaring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub mse: f64,
    /// Absent when the mask is empty.
    pub fmse: Option<f64>,
    pub psnr: f64,
    pub fg_ratio: f64,
}

impl MetricsRecord {
    pub fn bucket(&self) -> usize {
        ratio_bucket(self.fg_ratio)
    }
}

pub fn metrics(
    harmonized: &Image,
    reference: &Image,
    mask: &Mask,
    psnr_cap: f64,
) -> Result<MetricsRecord, ImageError> {
    if harmonized.dims() != reference.dims() {
        return Err(ImageError::Dimension {
            lhs: harmonized.dims(),
            rhs: reference.dims(),
        });
    }
    if harmonized.dims() != mask.dims() {
        return Err(ImageError::Dimension {
            lhs: harmonized.dims(),
            rhs: mask.dims(),
        });
    }
    let mut total = 0.0;
    let mut fg_total = 0.0;
    for (s, &fg) in mask.bits().iter().enumerate() {
        let se: f64 = (0..3)
            .map(|c| {
                let d = (harmonized.data()[s * 3 + c] - reference.data()[s * 3 + c]) * 255.0;
                d * d
            })
            .sum();
        total += se;
        if fg {
            fg_total += se;
        }
    }
    let sites = mask.bits().len();
    let fg = mask.count();
    let mse = total / (sites * 3) as f64;
    let fmse = (fg > 0).then(|| fg_total / (fg * 3) as f64);
    let psnr = if mse > 0.0 {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(psnr_cap)
    } else {
        psnr_cap
    };
    Ok(MetricsRecord {
        mse,
        fmse,
        psnr,
        fg_ratio: fg as f64 / sites as f64,
    })
}

/// Foreground-ratio bins `[0, 5%]`, `(5%, 15%]`, `(15%, 100%]`; a ratio on a
/// boundary belongs to the lower bin.
pub fn ratio_bucket(fg_ratio: f64) -> usize {
    if fg_ratio <= 0.05 {
        0
    } else if fg_ratio <= 0.15 {
        1
    } else {
        2
    }
}

/// `id,fg_ratio,bucket,mse,fmse,psnr`, header first; an absent fMSE is an
/// empty field.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[(String, MetricsRecord)]) -> io::Result<()> {
    writeln!(w, "id,fg_ratio,bucket,mse,fmse,psnr")?;
    for (id, r) in rows {
        let fmse = r.fmse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{id},{},{},{},{fmse},{}",
            r.fg_ratio,
            r.bucket(),
            r.mse,
            r.psnr
        )?;
    }
    Ok(())
}
