//! The imaging chain: viewport crop, exposure scaling, motion blur, noise,
//! response curve, quantization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::GrayImage;

use super::{CameraModel, CameraParams, RadianceScene};

/// One rendered sensor frame with the settings that produced it.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: GrayImage,
    pub time_index: usize,
    /// 1 is the reference camera, 2 the perturbed sampler camera.
    pub camera_id: u8,
    pub params: CameraParams,
}

/// Pre-quantization intensities in [0, 1], f64. Kept separate from
/// [`GrayImage`] because tests reason about the continuous response.
pub struct Intensities {
    pub size: usize,
    pub data: Vec<f64>,
}

fn blur_kernel(len: f64) -> Vec<f64> {
    // Fractional-length box: tap k covers [k-0.5, k+0.5] and is weighted by
    // its overlap with [-len/2, len/2]. Continuous in `len`, so intensity is
    // exactly monotone in exposure even as the kernel widens.
    let half = len / 2.0;
    let k_max = ((len - 1.0) / 2.0).ceil().max(0.0) as i64;
    let mut w = Vec::with_capacity((2 * k_max + 1) as usize);
    for k in -k_max..=k_max {
        let lo = (k as f64 - 0.5).max(-half);
        let hi = (k as f64 + 0.5).min(half);
        w.push((hi - lo).max(0.0) / len);
    }
    w
}

#[inline]
fn bilinear(buf: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (side - 1) as f64);
    let yc = y.clamp(0.0, (side - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(side - 1);
    let y1 = (y0 + 1).min(side - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let top = buf[y0 * side + x0] * (1.0 - fx) + buf[y0 * side + x1] * fx;
    let bot = buf[y1 * side + x0] * (1.0 - fx) + buf[y1 * side + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Renders the continuous response at step `t`. `noise_rng` draws one normal
/// variate per pixel when present; pass `None` for a noise-free render.
pub fn render_intensities(
    scene: &RadianceScene,
    t: usize,
    params: CameraParams,
    model: &CameraModel,
    mut noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<Intensities> {
    model.validate()?;
    if t >= scene.len() {
        return Err(Error::FrameOutOfRange { index: t, len: scene.len() });
    }
    let vp = scene.viewport;
    let traj = scene.trajectory[t];
    let speed = (traj.vx * traj.vx + traj.vy * traj.vy).sqrt();
    let blur_len = if model.blur_enabled && speed > 0.0 {
        (speed * params.exposure_s()).max(1.0)
    } else {
        1.0
    };
    let (dir_x, dir_y) = if speed > 0.0 { (traj.vx / speed, traj.vy / speed) } else { (0.0, 0.0) };

    // Exposure factor. gain*exposure is computed as a single product so that
    // scaling either parameter by the same factor lands on the same floats.
    let ge = params.exposure_s() * params.gain_linear();
    let factor = scene.illumination[t] * (ge / model.full_well_scale);

    let pad = (blur_len / 2.0).ceil() as usize + 2;
    let padded = vp + 2 * pad;
    let half = (vp - 1) as f64 / 2.0;
    let mut x_pad = vec![0.0f64; padded * padded];
    for j in 0..padded {
        let fy = traj.y + (j as f64 - pad as f64) - half;
        for i in 0..padded {
            let fx = traj.x + (i as f64 - pad as f64) - half;
            x_pad[j * padded + i] = f64::from(scene.field.sample_clamped(fx as f32, fy as f32)) * factor;
        }
    }

    let mut x = vec![0.0f64; vp * vp];
    if blur_len > 1.0 {
        let kernel = blur_kernel(blur_len);
        let k_max = (kernel.len() / 2) as i64;
        for j in 0..vp {
            for i in 0..vp {
                let px = (i + pad) as f64;
                let py = (j + pad) as f64;
                let mut acc = 0.0;
                for (ki, &kw) in kernel.iter().enumerate() {
                    let k = ki as i64 - k_max;
                    acc += kw * bilinear(&x_pad, padded, px + k as f64 * dir_x, py + k as f64 * dir_y);
                }
                x[j * vp + i] = acc;
            }
        }
    } else {
        for j in 0..vp {
            for i in 0..vp {
                x[j * vp + i] = x_pad[(j + pad) * padded + (i + pad)];
            }
        }
    }

    if let Some(rng) = noise_rng.as_deref_mut() {
        let g = params.gain_linear();
        for v in &mut x {
            // One draw per pixel regardless of sigma keeps streams aligned
            // across camera models.
            let z: f64 = rng.sample(StandardNormal);
            let sigma = model.read_noise_sigma * g + model.shot_noise_scale * v.max(0.0).sqrt() * g;
            *v += sigma * z;
        }
    }

    let inv_gamma = 1.0 / model.crf_gamma;
    for v in &mut x {
        *v = v.clamp(0.0, 1.0).powf(inv_gamma);
    }
    Ok(Intensities { size: vp, data: x })
}

pub fn render_frame(
    scene: &RadianceScene,
    t: usize,
    params: CameraParams,
    model: &CameraModel,
    camera_id: u8,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<Frame> {
    if camera_id != 1 && camera_id != 2 {
        return Err(Error::InvalidConfig(format!("camera_id {camera_id} must be 1 or 2")));
    }
    let y = render_intensities(scene, t, params, model, noise_rng)?;
    let maxval = f64::from((1u32 << model.quantization_bits) - 1);
    let data: Vec<u16> =
        y.data.iter().map(|&v| (v * maxval).round() as u16).collect();
    let image = GrayImage::new(y.size, y.size, model.quantization_bits, data)?;
    Ok(Frame { image, time_index: t, camera_id, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};
    use crate::sim::{make_tunnel_scene, TunnelSceneConfig};

    fn small_scene(seed: u64) -> RadianceScene {
        let cfg = TunnelSceneConfig { viewport: 64, field_scale: 4, ..Default::default() };
        make_tunnel_scene(&cfg, seed).unwrap()
    }

    fn flat_scene(level: f32, steps: usize, speed: f64) -> RadianceScene {
        let side = 128;
        let mut field = crate::image::FloatImage::zeros(side, side);
        for v in &mut field.data {
            *v = level;
        }
        let trajectory = (0..steps)
            .map(|_| super::super::TrajectoryPoint { x: 64.0, y: 64.0, vx: speed, vy: 0.0 })
            .collect();
        RadianceScene { field, viewport: 64, trajectory, illumination: vec![1.0; steps], dt: 1.0 / 15.0 }
    }

    fn params(g: f64, e: f64) -> CameraParams {
        CameraParams::new(g, e).unwrap()
    }

    #[test]
    fn zero_radiance_with_zero_read_noise_renders_exactly_zero() {
        let scene = flat_scene(0.0, 1, 0.0);
        let model = CameraModel { read_noise_sigma: 0.0, ..Default::default() };
        let mut rng = stream(1, tag::FRAME_NOISE, &[1, 0]);
        let f = render_frame(&scene, 0, params(30.0, 30e-3), &model, 1, Some(&mut rng)).unwrap();
        assert!(f.image.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn saturating_exposure_renders_full_scale_everywhere() {
        let scene = small_scene(2);
        let model = CameraModel::default().without_noise();
        let f = render_frame(&scene, 0, params(30.0, 30e-3), &model, 1, None).unwrap();
        let max = f.image.max_value();
        assert!(f.image.data().iter().all(|&v| v == max));
    }

    #[test]
    fn rendering_is_deterministic_per_stream() {
        let scene = small_scene(3);
        let model = CameraModel::default();
        let p = params(5.0, 1e-3);
        let mut r1 = stream(9, tag::FRAME_NOISE, &[1, 4]);
        let mut r2 = stream(9, tag::FRAME_NOISE, &[1, 4]);
        let a = render_frame(&scene, 4, p, &model, 1, Some(&mut r1)).unwrap();
        let b = render_frame(&scene, 4, p, &model, 1, Some(&mut r2)).unwrap();
        assert_eq!(a.image, b.image);
        let mut r3 = stream(9, tag::FRAME_NOISE, &[2, 4]);
        let c = render_frame(&scene, 4, p, &model, 2, Some(&mut r3)).unwrap();
        assert_ne!(a.image, c.image, "independent streams should differ");
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let scene = small_scene(4);
        let err = render_frame(&scene, scene.len(), params(0.0, 1e-3), &CameraModel::default(), 1, None);
        assert!(matches!(err, Err(Error::FrameOutOfRange { .. })));
    }

    #[test]
    fn doubling_exposure_matches_doubling_linear_gain() {
        let scene = small_scene(5);
        let model = CameraModel { blur_enabled: false, ..Default::default() }.without_noise();
        // Pick a gain whose doubled linear value is exactly representable as
        // a product: compare E*2 against a camera at linear gain g*2 by
        // doubling the exposure instead on both sides of the product.
        let base_e = 2e-3;
        let g_db = 6.0;
        // Doubling exposure exactly doubles the gain*exposure product.
        let pa = params(g_db, 2.0 * base_e);
        let pb = params(g_db, base_e);
        assert_eq!(
            (pa.exposure_s() * pa.gain_linear()).to_bits(),
            (2.0 * (pb.exposure_s() * pb.gain_linear())).to_bits()
        );
        // Intensity responds to that product only: doubled exposure matches
        // doubled linear gain to float rounding of the dB conversion.
        let a = render_intensities(&scene, 0, pa, &model, None).unwrap();
        let g2_db = g_db + 20.0 * 2f64.log10();
        let c = render_intensities(&scene, 0, params(g2_db, base_e), &model, None).unwrap();
        for (va, vc) in a.data.iter().zip(&c.data) {
            assert!((va - vc).abs() <= 1e-9, "{va} vs {vc}");
        }
        let b = render_intensities(&scene, 0, pb, &model, None).unwrap();
        assert!(b.data.iter().zip(&a.data).any(|(x, y)| x != y));
    }

    #[test]
    fn intensity_is_monotone_in_exposure_and_gain() {
        let scene = small_scene(6);
        let model = CameraModel::default().without_noise();
        let base = render_intensities(&scene, 2, params(6.0, 2e-3), &model, None).unwrap();
        let more_e = render_intensities(&scene, 2, params(6.0, 2.6e-3), &model, None).unwrap();
        let more_g = render_intensities(&scene, 2, params(9.0, 2e-3), &model, None).unwrap();
        for i in 0..base.data.len() {
            assert!(more_e.data[i] >= base.data[i], "exposure increase dimmed pixel {i}");
            assert!(more_g.data[i] >= base.data[i], "gain increase dimmed pixel {i}");
        }
    }

    #[test]
    fn blur_widens_with_exposure_at_fixed_brightness() {
        // Hold gain*exposure fixed while raising exposure: only the blur
        // kernel changes, so gradient energy must not grow.
        let model = CameraModel { read_noise_sigma: 0.0, shot_noise_scale: 0.0, ..Default::default() };
        let mut worse = 0usize;
        for seed in 0..5u64 {
            let scene = small_scene(100 + seed);
            let e1 = 4e-3f64;
            let e2 = 16e-3f64;
            let g1 = 12.0;
            let g2 = 12.0 - 20.0 * (e2 / e1).log10();
            let a = render_intensities(&scene, 0, params(g1, e1), &model, None).unwrap();
            let b = render_intensities(&scene, 0, params(g2, e2), &model, None).unwrap();
            let grad_var = |img: &Intensities| {
                let n = img.size;
                let mut acc = 0.0;
                let mut count = 0.0;
                for y in 1..n - 1 {
                    for x in 1..n - 1 {
                        let gx = img.data[y * n + x + 1] - img.data[y * n + x - 1];
                        let gy = img.data[(y + 1) * n + x] - img.data[(y - 1) * n + x];
                        acc += gx * gx + gy * gy;
                        count += 1.0;
                    }
                }
                acc / count
            };
            if grad_var(&b) > grad_var(&a) {
                worse += 1;
            }
        }
        assert_eq!(worse, 0, "longer exposure sharpened {worse} of 5 scenes");
    }

    #[test]
    fn default_calibration_exposes_outdoor_scene_in_low_range() {
        // A unit-radiance scene should sit near the mean target at modest
        // settings, leaving headroom for 60 dB of attenuation.
        let scene = small_scene(7);
        let model = CameraModel::default().without_noise();
        let f = render_frame(&scene, 0, params(0.0, 0.3e-3), &model, 1, None).unwrap();
        let mean = f.image.mean_intensity();
        assert!(
            (0.3..0.6).contains(&mean),
            "mean {mean} at (0 dB, 0.3 ms) should be near mid-scale"
        );
    }

    #[test]
    fn sixteen_bit_quantization_spans_full_range() {
        let scene = small_scene(8);
        let model =
            CameraModel { quantization_bits: 16, ..Default::default() }.without_noise();
        let f = render_frame(&scene, 0, params(30.0, 30e-3), &model, 1, None).unwrap();
        assert_eq!(f.image.max_value(), 65535);
        assert!(f.image.data().iter().all(|&v| v == 65535));
    }
}
