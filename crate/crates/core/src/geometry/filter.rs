use rayon::prelude::*;

use super::{DepthFrame, GeometryError};

/// Median over the valid samples of a `window`×`window` neighbourhood.
///
/// Invalid samples (`0.0`) are excluded, so a dropout pixel surrounded by
/// valid data is filled in. A pixel with no valid neighbour stays invalid.
pub fn median_filter(frame: &DepthFrame, window: usize) -> Result<DepthFrame, GeometryError> {
    if !matches!(window, 3 | 5 | 7) {
        return Err(GeometryError::InvalidParameter(format!(
            "median window must be 3, 5 or 7, got {window}"
        )));
    }
    let (w, h) = (frame.width(), frame.height());
    let r = window / 2;
    let src = frame.depth();
    let mut out = vec![0.0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        let mut scratch = Vec::with_capacity(window * window);
        let v0 = v.saturating_sub(r);
        let v1 = (v + r).min(h - 1);
        for (u, px) in row.iter_mut().enumerate() {
            scratch.clear();
            let u0 = u.saturating_sub(r);
            let u1 = (u + r).min(w - 1);
            for vv in v0..=v1 {
                let line = &src[vv * w..(vv + 1) * w];
                scratch.extend(line[u0..=u1].iter().copied().filter(|&d| d > 0.0));
            }
            *px = median_in_place(&mut scratch);
        }
    });
    frame.with_depth(out)
}

fn median_in_place(values: &mut [f32]) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Flags depth discontinuities: a pixel is `true` when it is invalid or when
/// its depth differs from any 4-neighbour by more than `jump_threshold`.
/// Invalid neighbours compare as depth `0.0`, so silhouette pixels bordering
/// empty space are flagged as well.
pub fn occlusion_mask(frame: &DepthFrame, jump_threshold: f64) -> Result<Vec<bool>, GeometryError> {
    if !(jump_threshold > 0.0 && jump_threshold.is_finite()) {
        return Err(GeometryError::InvalidParameter(format!(
            "jump threshold must be positive, got {jump_threshold}"
        )));
    }
    let (w, h) = (frame.width(), frame.height());
    let d = frame.depth();
    let mut mask = vec![false; w * h];
    mask.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, flag) in row.iter_mut().enumerate() {
            let z = d[v * w + u];
            if z <= 0.0 {
                *flag = true;
                continue;
            }
            let z = z as f64;
            let jump = |other: f32| (z - other as f64).abs() > jump_threshold;
            *flag = (u > 0 && jump(d[v * w + u - 1]))
                || (u + 1 < w && jump(d[v * w + u + 1]))
                || (v > 0 && jump(d[(v - 1) * w + u]))
                || (v + 1 < h && jump(d[(v + 1) * w + u]));
        }
    });
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;

    fn frame(w: u32, h: u32, depth: Vec<f32>) -> DepthFrame {
        let k = CameraIntrinsics::centered(w, h, 100.0).unwrap();
        DepthFrame::new(k, 7, 3, depth).unwrap()
    }

    #[test]
    fn median_of_constant_frame_is_identity() {
        let f = frame(6, 5, vec![1.0; 30]);
        for window in [3, 5, 7] {
            assert_eq!(median_filter(&f, window).unwrap(), f);
        }
    }

    #[test]
    fn median_removes_spike() {
        let mut d = vec![1.0; 9];
        d[4] = 9.0;
        let out = median_filter(&frame(3, 3, d), 3).unwrap();
        assert_eq!(out.at(1, 1), 1.0);
    }

    #[test]
    fn median_fills_isolated_dropout() {
        let mut d = vec![1.0; 9];
        d[4] = 0.0;
        let out = median_filter(&frame(3, 3, d), 3).unwrap();
        assert_eq!(out.at(1, 1), 1.0);
    }

    #[test]
    fn median_keeps_pixel_without_valid_neighbours() {
        let mut d = vec![0.0; 25];
        d[0] = 2.0;
        let out = median_filter(&frame(5, 5, d), 3).unwrap();
        assert_eq!(out.at(4, 4), 0.0);
        assert_eq!(out.at(1, 1), 2.0);
        assert_eq!(out.timestamp_us, 7);
        assert_eq!(out.sequence, 3);
    }

    #[test]
    fn median_rejects_bad_window() {
        let f = frame(3, 3, vec![1.0; 9]);
        for window in [0, 1, 2, 4, 9] {
            assert!(matches!(median_filter(&f, window), Err(GeometryError::InvalidParameter(_))));
        }
    }

    #[test]
    fn constant_frame_has_no_discontinuities() {
        let mask = occlusion_mask(&frame(8, 6, vec![1.0; 48]), 0.1).unwrap();
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn seam_between_half_planes_flags_two_columns() {
        let (w, h) = (8usize, 5usize);
        let depth: Vec<f32> = (0..w * h).map(|i| if i % w < 4 { 1.0 } else { 2.0 }).collect();
        let mask = occlusion_mask(&frame(w as u32, h as u32, depth), 0.5).unwrap();
        for v in 0..h {
            for u in 0..w {
                assert_eq!(mask[v * w + u], u == 3 || u == 4, "pixel ({u}, {v})");
            }
        }
    }

    #[test]
    fn invalid_pixel_is_flagged() {
        let mut d = vec![1.0; 25];
        d[12] = 0.0;
        let mask = occlusion_mask(&frame(5, 5, d), 0.1).unwrap();
        assert!(mask[12]);
        assert!(occlusion_mask(&frame(5, 5, vec![1.0; 25]), 0.0).is_err());
    }
}
