//! Requantization of decoded spectral values into real MDCT amplitudes.

use super::tables::{sfb_bounds, PRETAB};
use super::{BlockType, Mp3Error, ScaleFactors, SideInfo, SPECTRUM_LEN};

/// Invert the quantizer: `xr[i] = sign(q) * |q|^(4/3) * 2^e` where the
/// exponent combines the global gain, the per-window subblock gain (short
/// blocks), the band scalefactor and preemphasis:
///
/// ```text
/// long:  e = (global_gain - 210) / 4 - m * (scalefac[band] + preflag * pretab[band])
/// short: e = (global_gain - 210 - 8 * subblock_gain[win]) / 4 - m * scalefac[band][win]
/// ```
///
/// with `m` = 0.5 (or 1.0 when `scalefac_scale` is set). Output order equals
/// the decode order of `quantized`; short-block coefficients are not
/// reordered, so signs and zeros line up index by index. Math is done in
/// double precision and emitted as `f32`.
pub fn requantize(
    quantized: &[i32],
    side: &SideInfo,
    scalefactors: &ScaleFactors,
    sampling_rate: u32,
) -> Result<Vec<f32>, Mp3Error> {
    assert_eq!(quantized.len(), SPECTRUM_LEN);
    let (sfb_long, sfb_short) = sfb_bounds(sampling_rate)
        .ok_or(Mp3Error::UnsupportedFormat(format!("{sampling_rate} Hz")))?;

    let multiplier = if side.scalefac_scale { 1.0 } else { 0.5 };
    let global = f64::from(side.global_gain) - 210.0;
    let mut exponents = [0.0f64; SPECTRUM_LEN];

    let long_exponent = |band: usize| -> f64 {
        let sf = if band < 21 { scalefactors.long[band] } else { 0 };
        let pre = if side.preflag { PRETAB[band.min(21)] } else { 0 };
        0.25 * global - multiplier * f64::from(sf + pre)
    };
    let short_exponent = |band: usize, window: usize| -> f64 {
        let sf = if band < 12 { scalefactors.short[band][window] } else { 0 };
        0.25 * (global - 8.0 * f64::from(side.subblock_gain[window])) - multiplier * f64::from(sf)
    };

    let short_blocks = side.window_switching_flag && side.block_type == BlockType::Short;
    let long_end = if !short_blocks {
        SPECTRUM_LEN
    } else if side.mixed_block_flag {
        36
    } else {
        0
    };

    // Long (or mixed long-part) region: band-major.
    let mut band = 0usize;
    for i in 0..long_end {
        while sfb_long[band + 1] as usize <= i {
            band += 1;
        }
        exponents[i] = long_exponent(band);
    }

    // Short region: bands of three interleaved windows, starting at band 3
    // for mixed blocks.
    if short_blocks {
        let first_band = if side.mixed_block_flag { 3 } else { 0 };
        for band in first_band..13 {
            let start = sfb_short[band] as usize * 3;
            let width = (sfb_short[band + 1] - sfb_short[band]) as usize;
            for window in 0..3 {
                let e = short_exponent(band, window);
                for j in 0..width {
                    exponents[start + window * width + j] = e;
                }
            }
        }
    }

    let out = quantized
        .iter()
        .zip(exponents.iter())
        .map(|(&q, &e)| {
            if q == 0 {
                0.0f32
            } else {
                let mag = f64::from(q.unsigned_abs()).powf(4.0 / 3.0);
                (f64::from(q.signum()) * mag * e.exp2()) as f32
            }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mp3::ScaleFactorLayout;

    fn side() -> SideInfo {
        SideInfo {
            main_data_begin: 0,
            part2_3_length: 0,
            big_values: 0,
            global_gain: 210,
            scalefac_compress: 0,
            window_switching_flag: false,
            block_type: BlockType::Normal,
            mixed_block_flag: false,
            table_select: [0; 3],
            subblock_gain: [0; 3],
            region0_count: 0,
            region1_count: 0,
            preflag: false,
            scalefac_scale: false,
            count1table_select: false,
        }
    }

    #[test]
    fn zero_spectrum_requantizes_to_zero() {
        let q = vec![0i32; SPECTRUM_LEN];
        let sf = ScaleFactors::zeroed(ScaleFactorLayout::Long);
        let xr = requantize(&q, &side(), &sf, 44100).unwrap();
        assert!(xr.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gain_maps_one_to_one() {
        // global_gain = 210 makes the gain term 2^0; q = 1 -> 1.0.
        let mut q = vec![0i32; SPECTRUM_LEN];
        q[0] = 1;
        q[100] = -1;
        let sf = ScaleFactors::zeroed(ScaleFactorLayout::Long);
        let xr = requantize(&q, &side(), &sf, 44100).unwrap();
        assert_eq!(xr[0], 1.0);
        assert_eq!(xr[100], -1.0);
    }

    #[test]
    fn signs_follow_quantized_values() {
        let mut q = vec![0i32; SPECTRUM_LEN];
        for (i, v) in q.iter_mut().enumerate() {
            *v = if i % 3 == 0 { -(i as i32 % 17) } else { i as i32 % 13 };
        }
        let mut s = side();
        s.global_gain = 150;
        s.scalefac_scale = true;
        let mut sf = ScaleFactors::zeroed(ScaleFactorLayout::Long);
        for (band, v) in sf.long.iter_mut().enumerate() {
            *v = (band % 4) as u32;
        }
        let xr = requantize(&q, &s, &sf, 44100).unwrap();
        for (qi, xi) in q.iter().zip(&xr) {
            if *qi == 0 {
                assert_eq!(*xi, 0.0);
            } else {
                assert_eq!(qi.signum() as f32, xi.signum());
            }
        }
    }

    #[test]
    fn subblock_gain_scales_short_windows() {
        let mut q = vec![0i32; SPECTRUM_LEN];
        // Band 0 of a pure short block: windows at 0..4, 4..8, 8..12.
        q[0] = 1;
        q[4] = 1;
        q[8] = 1;
        let mut s = side();
        s.window_switching_flag = true;
        s.block_type = BlockType::Short;
        s.subblock_gain = [0, 1, 2];
        let sf = ScaleFactors::zeroed(ScaleFactorLayout::Short);
        let xr = requantize(&q, &s, &sf, 44100).unwrap();
        assert_eq!(xr[0], 1.0);
        assert_eq!(xr[4], 0.25); // 2^(-8/4)
        assert_eq!(xr[8], 0.0625);
    }
}
