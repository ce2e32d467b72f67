//! Single-level orthonormal 2-D Haar transform.
//!
//! For a 2×2 block `[a b; c d]` the four coefficients are
//!
//! ```text
//! ll = (a + b + c + d) / 2
//! lh = (a - b + c - d) / 2   horizontal high-pass (vertical edges)
//! hl = (a + b - c - d) / 2   vertical high-pass (horizontal edges)
//! hh = (a - b - c + d) / 2
//! ```
//!
//! The 4×4 block matrix is orthogonal, so the inverse is its transpose and
//! energy is preserved.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::image::ImagePlane;

thread_local! {
    static DWT_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward transforms run on this thread (plain or inside a graph).
pub fn dwt_call_count() -> u64 {
    DWT_CALLS.with(Cell::get)
}

pub fn reset_dwt_call_count() {
    DWT_CALLS.with(|c| c.set(0));
}

pub(crate) fn note_dwt_call() {
    DWT_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: ImagePlane,
    pub lh: ImagePlane,
    pub hl: ImagePlane,
    pub hh: ImagePlane,
    /// Size of the image before reflection padding to even dimensions.
    pub source_size: (usize, usize),
}

impl SubbandSet {
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn was_padded(&self) -> bool {
        self.source_size.0 % 2 == 1 || self.source_size.1 % 2 == 1
    }
}

/// Forward transform of one even-sized `h`×`w` plane into four `h/2`×`w/2` planes.
pub(crate) fn haar_forward_plane(
    src: &[f64],
    h: usize,
    w: usize,
    ll: &mut [f64],
    lh: &mut [f64],
    hl: &mut [f64],
    hh: &mut [f64],
) {
    let w2 = w / 2;
    for y in 0..h / 2 {
        let r0 = 2 * y * w;
        let r1 = r0 + w;
        for x in 0..w2 {
            let a = src[r0 + 2 * x];
            let b = src[r0 + 2 * x + 1];
            let c = src[r1 + 2 * x];
            let d = src[r1 + 2 * x + 1];
            let i = y * w2 + x;
            ll[i] = 0.5 * (a + b + c + d);
            lh[i] = 0.5 * (a - b + c - d);
            hl[i] = 0.5 * (a + b - c - d);
            hh[i] = 0.5 * (a - b - c + d);
        }
    }
}

/// Inverse of [`haar_forward_plane`]; `dst` is `2*h2`×`2*w2`.
pub(crate) fn haar_inverse_plane(
    ll: &[f64],
    lh: &[f64],
    hl: &[f64],
    hh: &[f64],
    h2: usize,
    w2: usize,
    dst: &mut [f64],
) {
    let w = 2 * w2;
    for y in 0..h2 {
        let r0 = 2 * y * w;
        let r1 = r0 + w;
        for x in 0..w2 {
            let i = y * w2 + x;
            let (s, p, q, t) = (ll[i], lh[i], hl[i], hh[i]);
            dst[r0 + 2 * x] = 0.5 * (s + p + q + t);
            dst[r0 + 2 * x + 1] = 0.5 * (s - p + q - t);
            dst[r1 + 2 * x] = 0.5 * (s + p - q - t);
            dst[r1 + 2 * x + 1] = 0.5 * (s - p - q + t);
        }
    }
}

fn planar(img: &ImagePlane) -> Vec<Vec<f64>> {
    let (h, w, c) = img.dims();
    (0..c)
        .map(|ch| (0..h * w).map(|i| img.data()[i * c + ch]).collect())
        .collect()
}

fn interleave(planes: &[Vec<f64>], h: usize, w: usize, range: (f64, f64)) -> Result<ImagePlane> {
    let c = planes.len();
    let mut data = vec![0.0; h * w * c];
    for (ch, p) in planes.iter().enumerate() {
        for (i, v) in p.iter().enumerate() {
            data[i * c + ch] = *v;
        }
    }
    Ok(ImagePlane::new(h, w, c, data)?.with_range(range.0, range.1))
}

/// Per-channel forward transform. Odd sizes are reflection-padded to even
/// first; the original size is kept in the result so [`idwt2`] can crop.
pub fn dwt2(img: &ImagePlane) -> Result<SubbandSet> {
    let (h, w, _) = img.dims();
    if h == 0 || w == 0 {
        return Err(Error::shape("dwt2 of an empty image"));
    }
    note_dwt_call();
    let (ph, pw) = (h + h % 2, w + w % 2);
    let padded;
    let src = if (ph, pw) != (h, w) {
        padded = img.pad_reflect(ph, pw);
        &padded
    } else {
        img
    };
    let (lo, hi) = img.range();
    let span = hi - lo;
    let (h2, w2) = (ph / 2, pw / 2);
    let mut bands = [vec![], vec![], vec![], vec![]];
    for plane in planar(src) {
        let mut ll = vec![0.0; h2 * w2];
        let mut lh = vec![0.0; h2 * w2];
        let mut hl = vec![0.0; h2 * w2];
        let mut hh = vec![0.0; h2 * w2];
        haar_forward_plane(&plane, ph, pw, &mut ll, &mut lh, &mut hl, &mut hh);
        bands[0].push(ll);
        bands[1].push(lh);
        bands[2].push(hl);
        bands[3].push(hh);
    }
    let [ll, lh, hl, hh] = bands;
    Ok(SubbandSet {
        ll: interleave(&ll, h2, w2, (2.0 * lo, 2.0 * hi))?,
        lh: interleave(&lh, h2, w2, (-span, span))?,
        hl: interleave(&hl, h2, w2, (-span, span))?,
        hh: interleave(&hh, h2, w2, (-span, span))?,
        source_size: (h, w),
    })
}

/// Inverse transform, cropping away any padding added by [`dwt2`].
pub fn idwt2(s: &SubbandSet) -> Result<ImagePlane> {
    let dims = s.ll.dims();
    for (name, b) in [("lh", &s.lh), ("hl", &s.hl), ("hh", &s.hh)] {
        if b.dims() != dims {
            return Err(Error::shape(format!(
                "subband {name} is {:?}, ll is {dims:?}",
                b.dims()
            )));
        }
    }
    let (h2, w2, _) = dims;
    let (sh, sw) = s.source_size;
    if sh > 2 * h2 || sw > 2 * w2 || sh + 1 < 2 * h2 || sw + 1 < 2 * w2 {
        return Err(Error::shape(format!(
            "source size {sh}x{sw} inconsistent with {h2}x{w2} subbands"
        )));
    }
    let (ll, lh, hl, hh) = (planar(&s.ll), planar(&s.lh), planar(&s.hl), planar(&s.hh));
    let mut out = Vec::with_capacity(ll.len());
    for ch in 0..ll.len() {
        let mut full = vec![0.0; 4 * h2 * w2];
        haar_inverse_plane(&ll[ch], &lh[ch], &hl[ch], &hh[ch], h2, w2, &mut full);
        if (sh, sw) != (2 * h2, 2 * w2) {
            let mut cropped = Vec::with_capacity(sh * sw);
            for y in 0..sh {
                cropped.extend_from_slice(&full[y * 2 * w2..y * 2 * w2 + sw]);
            }
            full = cropped;
        }
        out.push(full);
    }
    let (lo, hi) = s.ll.range();
    interleave(&out, sh, sw, (lo / 2.0, hi / 2.0))
}
