//! Image quality metrics: PSNR and SSIM over linear-range rgb buffers.

use crate::error::{InvrenderError, Result};

pub const PSNR_CAP: f64 = 99.0;

fn check_dims(
    a: &[f64],
    b: &[f64],
    a_width: usize,
    a_height: usize,
    b_width: usize,
    b_height: usize,
    channels: usize,
) -> Result<()> {
    if a_width != b_width
        || a_height != b_height
        || a.len() != a_width * a_height * channels
        || b.len() != a.len()
    {
        return Err(InvrenderError::ImageDimMismatch {
            a_width,
            a_height,
            b_width,
            b_height,
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over rgb buffers in [0,1]; identical
/// images cap at 99 dB.
pub fn psnr(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    check_dims(a, b, width, height, width, height, 3)?;
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let sigma = 1.5;
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter, valid region only (no padding).
fn filter_valid(img: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let k = ssim_kernel();
    let n = SSIM_WINDOW;
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * img[y * w + x + i];
            }
            horiz[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * horiz[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity with an 11×11 Gaussian window (σ=1.5),
/// C1=0.01², C2=0.03², on the channel-averaged grayscale.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    check_dims(a, b, width, height, width, height, 3)?;
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(InvrenderError::ImageTooSmall {
            width,
            height,
            window: SSIM_WINDOW,
        });
    }
    let gray = |img: &[f64]| -> Vec<f64> {
        img.chunks(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()
    };
    let ga = gray(a);
    let gb = gray(b);
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x * y).collect();

    let (mu_a, ow, oh) = filter_valid(&ga, width, height);
    let (mu_b, _, _) = filter_valid(&gb, width, height);
    let (e_aa, _, _) = filter_valid(&sq(&ga), width, height);
    let (e_bb, _, _) = filter_valid(&sq(&gb), width, height);
    let (e_ab, _, _) = filter_valid(&prod, width, height);

    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ow * oh) as f64)
}
