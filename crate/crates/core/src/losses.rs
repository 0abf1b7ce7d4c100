//! Training objectives: the four teacher fusion losses (intensity, SSIM,
//! gradient, color) with text-resolved weights, and the three-part
//! distillation objective (base fusion loss, feature matching through a
//! learnable channel projector, output reconstruction).
//!
//! Channel conventions: intensity/SSIM/gradient losses run on luma, the
//! color loss on the CbCr planes. L1 norms are means over pixels; the color
//! loss sums its two chroma channels, the gradient loss its two directions.

use candle_core::Tensor;
use candle_nn::{Conv2d, Conv2dConfig, Module, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;

/// Coefficients of the fusion and distillation objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_int: f64,
    pub lambda_ssim: f64,
    pub lambda_grad: f64,
    pub lambda_color: f64,
    /// Text-dependent weight of the infrared SSIM term.
    pub delta_ir: f64,
    /// (alpha1, alpha2, alpha3) of the distillation objective.
    pub alpha: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_int: 24.0,
            lambda_ssim: 40.0,
            lambda_grad: 48.0,
            lambda_color: 12.0,
            delta_ir: 1.0,
            alpha: [1.0, 1.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_int,
            self.lambda_ssim,
            self.lambda_grad,
            self.lambda_color,
            self.delta_ir,
            self.alpha[0],
            self.alpha[1],
            self.alpha[2],
        ];
        for v in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "loss weights must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_vec0::<f64>()?)
}

fn check_spatial(a: &Tensor, b: &Tensor) -> Result<()> {
    let (da, db) = (a.dims(), b.dims());
    if da[0] != db[0] || da[2..] != db[2..] {
        return Err(Error::shape_mismatch(da, db));
    }
    Ok(())
}

/// Mean |Y_f - max(Y_vis, Y_ir)| over pixels.
pub fn l_int(fused: &Tensor, vis_g: &Tensor, ir_g: &Tensor) -> Result<Tensor> {
    check_spatial(fused, vis_g)?;
    check_spatial(fused, ir_g)?;
    let yf = ops::luma(fused)?;
    let target = ops::luma(vis_g)?.maximum(&ops::luma(ir_g)?)?;
    Ok((yf - target)?.abs()?.mean_all()?)
}

/// (1 - ssim(Y_f, Y_vis)) + delta_ir * (1 - ssim(Y_f, Y_ir)).
pub fn l_ssim(fused: &Tensor, vis_g: &Tensor, ir_g: &Tensor, delta_ir: f64) -> Result<Tensor> {
    check_spatial(fused, vis_g)?;
    check_spatial(fused, ir_g)?;
    let yf = ops::luma(fused)?;
    let vis_term = (ops::ssim(&yf, &ops::luma(vis_g)?)? * (-1.0))? + 1.0;
    let ir_term = (ops::ssim(&yf, &ops::luma(ir_g)?)? * (-1.0))? + 1.0;
    Ok((vis_term? + (ir_term? * delta_ir)?)?)
}

/// Per direction d: mean | |grad_d Y_f| - max(|grad_d Y_vis|, |grad_d Y_ir|) |,
/// summed over the two Sobel directions.
pub fn l_grad(fused: &Tensor, vis_g: &Tensor, ir_g: &Tensor) -> Result<Tensor> {
    check_spatial(fused, vis_g)?;
    check_spatial(fused, ir_g)?;
    let (fx, fy) = ops::sobel_xy(&ops::luma(fused)?)?;
    let (vx, vy) = ops::sobel_xy(&ops::luma(vis_g)?)?;
    let (ix, iy) = ops::sobel_xy(&ops::luma(ir_g)?)?;
    let term = |f: &Tensor, v: &Tensor, i: &Tensor| -> Result<Tensor> {
        let target = v.abs()?.maximum(&i.abs()?)?;
        Ok((f.abs()? - target)?.abs()?.mean_all()?)
    };
    Ok((term(&fx, &vx, &ix)? + term(&fy, &vy, &iy)?)?)
}

/// Mean over pixels of |CbCr(fused) - CbCr(vis)|, summed over the two
/// chroma channels.
pub fn l_color(fused: &Tensor, vis_g: &Tensor) -> Result<Tensor> {
    check_spatial(fused, vis_g)?;
    let d = (ops::chroma(fused)? - ops::chroma(vis_g)?)?.abs()?;
    Ok(d.sum(1)?.mean_all()?)
}

/// Per-component values of one teacher-loss evaluation, as host floats.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_int: f64,
    pub l_ssim: f64,
    pub l_grad: f64,
    pub l_color: f64,
    /// Weighted sum recombined in f64.
    pub total: f64,
}

/// Weighted teacher objective. The returned tensor drives backprop; the
/// breakdown carries per-component values for logging and reporting.
pub struct TeacherLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

pub fn teacher_loss(
    fused: &Tensor,
    vis_g: &Tensor,
    ir_g: &Tensor,
    w: &LossWeights,
) -> Result<TeacherLoss> {
    w.validate()?;
    let li = l_int(fused, vis_g, ir_g)?;
    let ls = l_ssim(fused, vis_g, ir_g, w.delta_ir)?;
    let lg = l_grad(fused, vis_g, ir_g)?;
    let lc = l_color(fused, vis_g)?;
    let total = (((li.clone() * w.lambda_int)? + (ls.clone() * w.lambda_ssim)?)?
        + ((lg.clone() * w.lambda_grad)? + (lc.clone() * w.lambda_color)?)?)?;
    let breakdown = LossBreakdown {
        l_int: scalar(&li)?,
        l_ssim: scalar(&ls)?,
        l_grad: scalar(&lg)?,
        l_color: scalar(&lc)?,
        total: 0.0,
    };
    let breakdown = LossBreakdown {
        total: w.lambda_int * breakdown.l_int
            + w.lambda_ssim * breakdown.l_ssim
            + w.lambda_grad * breakdown.l_grad
            + w.lambda_color * breakdown.l_color,
        ..breakdown
    };
    Ok(TeacherLoss { total, breakdown })
}

/// Learnable per-level 1x1 projections from teacher channel widths down to
/// student widths, trained jointly with the student.
#[derive(Debug, Clone)]
pub struct DownProjector {
    convs: Vec<Conv2d>,
}

impl DownProjector {
    pub fn new(teacher_ch: &[usize], student_ch: &[usize], vb: VarBuilder) -> Result<Self> {
        if teacher_ch.len() != student_ch.len() {
            return Err(Error::shape_mismatch(teacher_ch, student_ch));
        }
        let mut convs = Vec::with_capacity(teacher_ch.len());
        for (l, (&tc, &sc)) in teacher_ch.iter().zip(student_ch.iter()).enumerate() {
            convs.push(candle_nn::conv2d(
                tc,
                sc,
                1,
                Conv2dConfig::default(),
                vb.pp(format!("l{l}")),
            )?);
        }
        Ok(Self { convs })
    }

    pub fn levels(&self) -> usize {
        self.convs.len()
    }

    pub fn project(&self, level: usize, t: &Tensor) -> Result<Tensor> {
        Ok(self.convs[level].forward(t)?)
    }
}

/// Sum over levels of mean |Down(F_teacher) - F_student|.
pub fn l_feat(
    teacher: &[Tensor],
    student: &[Tensor],
    proj: &DownProjector,
) -> Result<Tensor> {
    if teacher.len() != student.len() || teacher.len() != proj.levels() {
        return Err(Error::shape_mismatch(teacher.len(), student.len()));
    }
    let mut total: Option<Tensor> = None;
    for (l, (t, s)) in teacher.iter().zip(student.iter()).enumerate() {
        let projected = proj.project(l, t)?;
        if projected.dims() != s.dims() {
            return Err(Error::shape_mismatch(projected.dims(), s.dims()));
        }
        let term = (projected - s)?.abs()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    total.ok_or_else(|| Error::InvalidConfig("empty feature pyramid".into()))
}

/// Mean absolute difference over all pixels and channels.
pub fn l_res(fused_t: &Tensor, fused_s: &Tensor) -> Result<Tensor> {
    if fused_t.dims() != fused_s.dims() {
        return Err(Error::shape_mismatch(fused_t.dims(), fused_s.dims()));
    }
    Ok((fused_t - fused_s)?.abs()?.mean_all()?)
}

/// alpha1 * L_base + alpha2 * L_feat + alpha3 * L_res.
pub fn distill_loss(base: &Tensor, feat: &Tensor, res: &Tensor, alpha: [f64; 3]) -> Result<Tensor> {
    Ok((((base * alpha[0])? + (feat * alpha[1])?)? + (res * alpha[2])?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use candle_nn::{VarBuilder, VarMap};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    use crate::imgmath::{self, Image};

    fn dev() -> Device {
        Device::Cpu
    }

    fn tensor_from(data: Array3<f32>, dtype: DType) -> Tensor {
        let img = Image::new(data).unwrap();
        ops::image_to_tensor(&img, &dev(), dtype).unwrap()
    }

    fn random_rgb(rng: &mut ChaCha12Rng, h: usize, w: usize, dtype: DType) -> Tensor {
        tensor_from(
            Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.1..=0.9f32)),
            dtype,
        )
    }

    fn random_gray(rng: &mut ChaCha12Rng, h: usize, w: usize, dtype: DType) -> Tensor {
        tensor_from(
            Array3::from_shape_fn((h, w, 1), |_| rng.random_range(0.1..=0.9f32)),
            dtype,
        )
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn l_int_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let vis = random_rgb(&mut rng, 6, 6, DType::F64);
        let ir = random_gray(&mut rng, 6, 6, DType::F64);
        let target = ops::luma(&vis).unwrap().maximum(&ir).unwrap();
        // Fused luma equal to the elementwise max: zero loss. Build an RGB
        // image whose channels all equal the target so its luma matches.
        let fused = Tensor::cat(&[&target, &target, &target], 1).unwrap();
        assert!(val(&l_int(&fused, &vis, &ir).unwrap()) < 1e-9);

        let offset = (&fused + 0.1).unwrap();
        let loss = val(&l_int(&offset, &vis, &ir).unwrap());
        assert!((loss - 0.1).abs() < 1e-9);
    }

    #[test]
    fn l_int_hand_2x2() {
        // Y_vis = [[0, .2], [.4, .6]], Y_ir = [[.1, .1], [.5, .5]], Y_f = 0
        // -> mean of max = mean(.1, .2, .5, .6) = 0.35.
        let vis_y = Array3::from_shape_vec((2, 2, 1), vec![0.0, 0.2, 0.4, 0.6]).unwrap();
        let ir_y = Array3::from_shape_vec((2, 2, 1), vec![0.1, 0.1, 0.5, 0.5]).unwrap();
        let vis = tensor_from(vis_y, DType::F64);
        let ir = tensor_from(ir_y, DType::F64);
        let fused = Tensor::zeros((1, 1, 2, 2), DType::F64, &dev()).unwrap();
        let loss = val(&l_int(&fused, &vis, &ir).unwrap());
        // f32 image storage shifts the hand value by a few 1e-9.
        assert!((loss - 0.35).abs() < 1e-6);
    }

    #[test]
    fn l_ssim_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let vis = random_rgb(&mut rng, 12, 12, DType::F64);
        let ir = ops::luma(&vis).unwrap();
        for delta in [0.0, 1.0, 2.5] {
            assert!(val(&l_ssim(&vis, &vis, &ir, delta).unwrap()) < 1e-9);
        }

        let other_ir = random_gray(&mut rng, 12, 12, DType::F64);
        assert!(val(&l_ssim(&vis, &vis, &other_ir, 0.0).unwrap()) < 1e-9);

        // delta_ir = 2 doubles the infrared term relative to delta_ir = 1.
        let fused = random_rgb(&mut rng, 12, 12, DType::F64);
        let base = val(&l_ssim(&fused, &vis, &other_ir, 0.0).unwrap());
        let d1 = val(&l_ssim(&fused, &vis, &other_ir, 1.0).unwrap());
        let d2 = val(&l_ssim(&fused, &vis, &other_ir, 2.0).unwrap());
        assert!(((d2 - base) - 2.0 * (d1 - base)).abs() < 1e-9);
    }

    #[test]
    fn l_grad_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let vis = random_rgb(&mut rng, 8, 8, DType::F64);
        let ir = ops::luma(&vis).unwrap();
        assert!(val(&l_grad(&vis, &vis, &ir).unwrap()) < 1e-12);

        // Constant fused against textured sources: loss equals the mean of
        // the per-direction max source Sobel magnitudes (oracle on luma).
        let ir2 = random_gray(&mut rng, 8, 8, DType::F64);
        let fused = Tensor::full(0.5, (1, 3, 8, 8), &dev())
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let got = val(&l_grad(&fused, &vis, &ir2).unwrap());
        let vis_img = ops::tensor_to_image(&ops::luma(&vis).unwrap()).unwrap();
        let ir_img = ops::tensor_to_image(&ir2).unwrap();
        let gv = imgmath::sobel(&vis_img).unwrap();
        let gi = imgmath::sobel(&ir_img).unwrap();
        let mut expected = 0.0f64;
        for (a, b) in gv.gx.iter().zip(gi.gx.iter()) {
            expected += (a.abs() as f64).max(b.abs() as f64);
        }
        let mut ey = 0.0f64;
        for (a, b) in gv.gy.iter().zip(gi.gy.iter()) {
            ey += (a.abs() as f64).max(b.abs() as f64);
        }
        let expected = expected / 64.0 + ey / 64.0;
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");

        // Sources constant, fused textured: loss is the mean fused Sobel
        // magnitude.
        let flat = Tensor::full(0.3, (1, 3, 8, 8), &dev())
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let flat_ir = Tensor::full(0.3, (1, 1, 8, 8), &dev())
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let got = val(&l_grad(&vis, &flat, &flat_ir).unwrap());
        let mut expected = 0.0f64;
        for v in gv.gx.iter() {
            expected += v.abs() as f64;
        }
        for v in gv.gy.iter() {
            expected += v.abs() as f64;
        }
        assert!((got - expected / 64.0).abs() < 1e-5);
    }

    #[test]
    fn l_color_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let vis = random_rgb(&mut rng, 6, 6, DType::F64);
        assert!(val(&l_color(&vis, &vis).unwrap()) < 1e-12);

        // Luminance shift (constant added to all RGB channels) leaves the
        // chroma planes unchanged: the BT.601 chroma rows sum to zero.
        let shifted = (&vis * 0.5).unwrap().affine(1.0, 0.2).unwrap();
        assert!(val(&l_color(&shifted, &(&vis * 0.5).unwrap()).unwrap()) < 1e-9);

        // Gray fused against pure red: |0.5 - 0.331264| + |0.5 - 1.0|.
        let red = Tensor::cat(
            &[
                Tensor::ones((1, 1, 4, 4), DType::F64, &dev()).unwrap(),
                Tensor::zeros((1, 2, 4, 4), DType::F64, &dev()).unwrap(),
            ],
            1,
        )
        .unwrap();
        let gray = Tensor::full(0.5, (1, 3, 4, 4), &dev())
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let got = val(&l_color(&gray, &red).unwrap());
        assert!((got - (0.168_736 + 0.5)).abs() < 1e-9);
    }

    #[test]
    fn teacher_loss_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let vis = random_rgb(&mut rng, 12, 12, DType::F64);
        let ir = ops::luma(&vis).unwrap();
        let w = LossWeights::default();
        let loss = teacher_loss(&vis, &vis, &ir, &w).unwrap();
        assert!(loss.breakdown.total.abs() < 1e-9);

        let zero = LossWeights {
            lambda_int: 0.0,
            lambda_ssim: 0.0,
            lambda_grad: 0.0,
            lambda_color: 0.0,
            ..Default::default()
        };
        let fused = random_rgb(&mut rng, 12, 12, DType::F64);
        let loss = teacher_loss(&fused, &vis, &ir, &zero).unwrap();
        assert_eq!(loss.breakdown.total, 0.0);
    }

    #[test]
    fn teacher_loss_recombination() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let vis = random_rgb(&mut rng, 4, 4, DType::F64);
        let ir = random_gray(&mut rng, 4, 4, DType::F64);
        let fused = random_rgb(&mut rng, 4, 4, DType::F64);
        let w = LossWeights::default();
        let loss = teacher_loss(&fused, &vis, &ir, &w).unwrap();
        let expected = 24.0 * val(&l_int(&fused, &vis, &ir).unwrap())
            + 40.0 * val(&l_ssim(&fused, &vis, &ir, w.delta_ir).unwrap())
            + 48.0 * val(&l_grad(&fused, &vis, &ir).unwrap())
            + 12.0 * val(&l_color(&fused, &vis).unwrap());
        assert!((loss.breakdown.total - expected).abs() < 1e-9);
        // The backprop tensor agrees with the f64 recombination to f32-ish
        // precision even in the f64 path.
        assert!((val(&loss.total) - expected).abs() < 1e-9);
    }

    #[test]
    fn teacher_loss_weight_homogeneity() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let vis = random_rgb(&mut rng, 8, 8, DType::F64);
        let ir = random_gray(&mut rng, 8, 8, DType::F64);
        let fused = random_rgb(&mut rng, 8, 8, DType::F64);
        let w = LossWeights::default();
        let k = 3.5;
        let scaled = LossWeights {
            lambda_int: w.lambda_int * k,
            lambda_ssim: w.lambda_ssim * k,
            lambda_grad: w.lambda_grad * k,
            lambda_color: w.lambda_color * k,
            ..w
        };
        let a = teacher_loss(&fused, &vis, &ir, &w).unwrap().breakdown.total;
        let b = teacher_loss(&fused, &vis, &ir, &scaled)
            .unwrap()
            .breakdown
            .total;
        assert!((b - k * a).abs() < 1e-9 * b.abs().max(1.0));
    }

    #[test]
    fn no_dead_terms() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let vis = random_rgb(&mut rng, 12, 12, DType::F64);
        let ir = random_gray(&mut rng, 12, 12, DType::F64);
        let fused = random_rgb(&mut rng, 12, 12, DType::F64);
        let full = teacher_loss(&fused, &vis, &ir, &LossWeights::default())
            .unwrap()
            .breakdown
            .total;
        for knock in 0..4 {
            let mut w = LossWeights::default();
            match knock {
                0 => w.lambda_int = 0.0,
                1 => w.lambda_ssim = 0.0,
                2 => w.lambda_grad = 0.0,
                _ => w.lambda_color = 0.0,
            }
            let ablated = teacher_loss(&fused, &vis, &ir, &w).unwrap().breakdown.total;
            assert!(
                (full - ablated).abs() > 1e-6,
                "term {knock} had no effect on a generic input"
            );
        }
    }

    #[test]
    fn l_res_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let a = random_rgb(&mut rng, 5, 5, DType::F64);
        assert_eq!(val(&l_res(&a, &a).unwrap()), 0.0);
        let b = (&a + 0.25).unwrap();
        assert!((val(&l_res(&a, &b).unwrap()) - 0.25).abs() < 1e-9);

        let c = random_rgb(&mut rng, 5, 5, DType::F64);
        let got = val(&l_res(&a, &c).unwrap());
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let cv = c.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expected: f64 =
            av.iter().zip(cv.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        assert!((got - expected).abs() < 1e-12);
    }

    fn projector(levels: &[(usize, usize)], dtype: DType) -> (DownProjector, VarMap) {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &dev());
        let (t, s): (Vec<usize>, Vec<usize>) = levels.iter().copied().unzip();
        (DownProjector::new(&t, &s, vb).unwrap(), varmap)
    }

    #[test]
    fn l_feat_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let (proj, _vm) = projector(&[(4, 2), (8, 4)], DType::F64);
        let t0 = Tensor::rand(0f64, 1.0, (1, 4, 6, 6), &dev()).unwrap();
        let t1 = Tensor::rand(0f64, 1.0, (1, 8, 3, 3), &dev()).unwrap();
        // Student features exactly equal to the projected teacher features.
        let s0 = proj.project(0, &t0).unwrap();
        let s1 = proj.project(1, &t1).unwrap();
        let zero = l_feat(&[t0.clone(), t1.clone()], &[s0.clone(), s1.clone()], &proj).unwrap();
        assert_eq!(val(&zero), 0.0);

        // A constant offset at one level contributes exactly that offset.
        let s0_off = (&s0 + 0.125).unwrap();
        let got = val(&l_feat(&[t0.clone(), t1.clone()], &[s0_off, s1.clone()], &proj).unwrap());
        assert!((got - 0.125).abs() < 1e-12);

        // Random pyramids against a flat-loop recomputation.
        let s0r = Tensor::rand(0f64, 1.0, (1, 2, 6, 6), &dev()).unwrap();
        let s1r = Tensor::rand(0f64, 1.0, (1, 4, 3, 3), &dev()).unwrap();
        let got = val(&l_feat(&[t0.clone(), t1.clone()], &[s0r.clone(), s1r.clone()], &proj).unwrap());
        let mut expected = 0.0;
        for (t, s, l) in [(&t0, &s0r, 0), (&t1, &s1r, 1)] {
            let p = proj.project(l, t).unwrap();
            let pv = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let sv = s.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            expected +=
                pv.iter().zip(sv.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pv.len() as f64;
        }
        assert!((got - expected).abs() < 1e-12);
        let _ = &mut rng;
    }

    #[test]
    fn l_feat_spatial_mismatch_errors() {
        let (proj, _vm) = projector(&[(4, 2)], DType::F64);
        let t0 = Tensor::rand(0f64, 1.0, (1, 4, 6, 6), &dev()).unwrap();
        let s0 = Tensor::rand(0f64, 1.0, (1, 2, 5, 5), &dev()).unwrap();
        assert!(matches!(
            l_feat(&[t0], &[s0], &proj),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn distill_loss_arithmetic() {
        let base = Tensor::full(0.2f64, (), &dev()).unwrap();
        let feat = Tensor::full(0.3f64, (), &dev()).unwrap();
        let res = Tensor::full(0.5f64, (), &dev()).unwrap();
        let total = distill_loss(&base, &feat, &res, [1.0, 1.0, 1.0]).unwrap();
        assert!((val(&total) - 1.0).abs() < 1e-12);
        let only_base = distill_loss(&base, &feat, &res, [1.0, 0.0, 0.0]).unwrap();
        assert!((val(&only_base) - 0.2).abs() < 1e-12);
        let zeros = distill_loss(
            &Tensor::zeros((), candle_core::DType::F64, &dev()).unwrap(),
            &Tensor::zeros((), candle_core::DType::F64, &dev()).unwrap(),
            &Tensor::zeros((), candle_core::DType::F64, &dev()).unwrap(),
            [1.0, 1.0, 1.0],
        )
        .unwrap();
        assert_eq!(val(&zeros), 0.0);
    }

    #[test]
    fn losses_nonnegative_random() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..5 {
            let vis = random_rgb(&mut rng, 8, 8, DType::F64);
            let ir = random_gray(&mut rng, 8, 8, DType::F64);
            let fused = random_rgb(&mut rng, 8, 8, DType::F64);
            assert!(val(&l_int(&fused, &vis, &ir).unwrap()) >= 0.0);
            assert!(val(&l_ssim(&fused, &vis, &ir, 1.0).unwrap()) >= 0.0);
            assert!(val(&l_grad(&fused, &vis, &ir).unwrap()) >= 0.0);
            assert!(val(&l_color(&fused, &vis).unwrap()) >= 0.0);
            assert!(
                teacher_loss(&fused, &vis, &ir, &LossWeights::default())
                    .unwrap()
                    .breakdown
                    .total
                    >= 0.0
            );
        }
    }

    /// Backprop against central finite differences for the L1-style losses,
    /// evaluated away from kinks.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let vis = random_rgb(&mut rng, 8, 8, DType::F64);
        let ir = random_gray(&mut rng, 8, 8, DType::F64);
        let fused_data: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(0.1..=0.9f64)).collect();

        type LossFn = dyn Fn(&Tensor) -> Result<Tensor>;
        let vis2 = vis.clone();
        let ir2 = ir.clone();
        let vis3 = vis.clone();
        let cases: Vec<(&str, Box<LossFn>, f64)> = vec![
            (
                "l_int",
                Box::new(move |f: &Tensor| l_int(f, &vis, &ir)),
                1e-4,
            ),
            (
                "l_grad",
                Box::new(move |f: &Tensor| l_grad(f, &vis2, &ir2)),
                1e-4,
            ),
            (
                "l_color",
                Box::new(move |f: &Tensor| l_color(f, &vis3)),
                1e-4,
            ),
        ];
        for (name, f, tol) in cases {
            let var = Var::from_tensor(
                &Tensor::from_vec(fused_data.clone(), (1, 3, 8, 8), &dev()).unwrap(),
            )
            .unwrap();
            let loss = f(var.as_tensor()).unwrap();
            let grads = loss.backward().unwrap();
            let grad = grads
                .get(var.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let h = 1e-6;
            for _ in 0..10 {
                let i = rng.random_range(0..3 * 64usize);
                let eval = |delta: f64| {
                    let mut d = fused_data.clone();
                    d[i] += delta;
                    let t = Tensor::from_vec(d, (1, 3, 8, 8), &dev()).unwrap();
                    val(&f(&t).unwrap())
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grad[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((fd - an).abs() / denom) < tol,
                    "{name}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
