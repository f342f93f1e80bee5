use rand::Rng as _;

use super::{Mask, SegSample};
use crate::rng::Rng;
use crate::tensor::Tensor;

const IMAGE_FILL: f32 = -1.0;
const MASK_FILL: u8 = 0;

/// Degrees for angles; translation as a fraction of the image side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation: f64,
    pub shear: f64,
    pub scale: f64,
    pub translate: (f64, f64),
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams { rotation: 0.0, shear: 0.0, scale: 1.0, translate: (0.0, 0.0) }
    }

    /// Forward 2x2 part: rotation · shear · scale.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let k = self.shear.to_radians().tan();
        let rs = [[c, -s], [s, c]];
        let sh = [[1.0, k], [0.0, 1.0]];
        let m = [
            [rs[0][0] * sh[0][0] + rs[0][1] * sh[1][0], rs[0][0] * sh[0][1] + rs[0][1] * sh[1][1]],
            [rs[1][0] * sh[0][0] + rs[1][1] * sh[1][0], rs[1][0] * sh[0][1] + rs[1][1] * sh[1][1]],
        ];
        [[m[0][0] * self.scale, m[0][1] * self.scale], [m[1][0] * self.scale, m[1][1] * self.scale]]
    }
}

/// Rotation U[-180, 180]°, shear U[-5, 5]°, scale U[0.9, 1.1], translation
/// U[-0.05, 0.05] of the side per axis.
pub fn sample_affine(rng: &mut Rng) -> AffineParams {
    AffineParams {
        rotation: rng.random_range(-180.0..=180.0),
        shear: rng.random_range(-5.0..=5.0),
        scale: rng.random_range(0.9..=1.1),
        translate: (rng.random_range(-0.05..=0.05), rng.random_range(-0.05..=0.05)),
    }
}

pub fn random_affine(s: &SegSample, rng: &mut Rng) -> SegSample {
    apply_affine(s, &sample_affine(rng))
}

/// Warps about the image centre by inverse mapping: bilinear for the image,
/// nearest for the mask.
pub fn apply_affine(s: &SegSample, p: &AffineParams) -> SegSample {
    let (h, w) = (s.height(), s.width());
    let m = p.linear();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (p.translate.0 * w as f64, p.translate.1 * h as f64);
    let src = s.image.data();
    let mut image = Vec::with_capacity(h * w);
    let mut labels = s.mask.as_ref().map(|_| Vec::with_capacity(h * w));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx - tx, y as f64 - cy - ty);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            image.push(bilinear(src, h, w, sy, sx));
            if let (Some(out), Some(mask)) = (labels.as_mut(), s.mask.as_ref()) {
                let (ny, nx) = (sy.round(), sx.round());
                let inside = ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w;
                out.push(if inside { mask.labels[ny as usize * w + nx as usize] } else { MASK_FILL });
            }
        }
    }
    SegSample {
        id: s.id.clone(),
        image: Tensor::from_vec(&[1, h, w], image).expect("shape preserved"),
        mask: labels.map(|l| Mask { height: h, width: w, labels: l }),
    }
}

/// Taps outside the grid read the fill value.
fn bilinear(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let tap = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            IMAGE_FILL as f64
        } else {
            src[yy as usize * w + xx as usize] as f64
        }
    };
    let mut v = 0.0;
    for (wy, yy) in [(1.0 - fy, y0), (fy, y0 + 1.0)] {
        for (wx, xx) in [(1.0 - fx, x0), (fx, x0 + 1.0)] {
            let wt = wy * wx;
            if wt != 0.0 {
                v += wt * tap(yy, xx);
            }
        }
    }
    v as f32
}
