//! Binary feature-cache container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"STFC"
//! u16    version (currently 1)
//! u16    reserved (0)
//! u32    window_len L
//! u32 x4 mdct rows, mdct cols, scalefac rows, scalefac cols
//! u32    scalar count
//! u32    number of source entries
//!        per source: u32 byte length + UTF-8 path
//! u64    number of windows
//!        per window:
//!          u32  source id            u64  start frame
//!          L x u8                    labels
//!          L x rows x cols x f32     mdct grids
//!          L x rows x cols x f32     scalefactor grids
//!          L x scalars x f32         scalar vectors
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::Array2;

use super::{
    FeatureError, FeatureWindow, FrameFeatures, MDCT_COLS, MDCT_ROWS, N_SCALARS, SCALEFAC_COLS,
    SCALEFAC_ROWS,
};

pub const CACHE_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"STFC";

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Serialize windows into the cache format. The source table is built from
/// the distinct window origins in first-appearance order.
pub fn write_cache(w: &mut impl Write, windows: &[FeatureWindow]) -> Result<(), FeatureError> {
    let window_len = windows.first().map_or(super::WINDOW_LEN, |w| w.features.len());
    w.write_all(MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    put_u32(w, window_len as u32)?;
    put_u32(w, MDCT_ROWS as u32)?;
    put_u32(w, MDCT_COLS as u32)?;
    put_u32(w, SCALEFAC_ROWS as u32)?;
    put_u32(w, SCALEFAC_COLS as u32)?;
    put_u32(w, N_SCALARS as u32)?;

    let mut sources: Vec<&str> = Vec::new();
    let mut ids: HashMap<&str, u32> = HashMap::new();
    for win in windows {
        let src = win.origin.0.as_str();
        if !ids.contains_key(src) {
            ids.insert(src, sources.len() as u32);
            sources.push(src);
        }
    }
    put_u32(w, sources.len() as u32)?;
    for s in &sources {
        put_u32(w, s.len() as u32)?;
        w.write_all(s.as_bytes())?;
    }

    put_u64(w, windows.len() as u64)?;
    for win in windows {
        if win.features.len() != window_len || win.labels.len() != window_len {
            return Err(FeatureError::Cache(format!(
                "window at {}:{} has inconsistent length",
                win.origin.0, win.origin.1
            )));
        }
        put_u32(w, ids[win.origin.0.as_str()])?;
        put_u64(w, win.origin.1 as u64)?;
        w.write_all(&win.labels)?;
        for f in &win.features {
            for v in f.mdct_grid.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for f in &win.features {
            for v in f.scalefac_grid.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for f in &win.features {
            for v in &f.scalars {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a cache written by [`write_cache`], validating the header.
pub fn read_cache(r: &mut impl Read) -> Result<Vec<FeatureWindow>, FeatureError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FeatureError::Cache("bad magic".into()));
    }
    let version = get_u16(r)?;
    if version != CACHE_VERSION {
        return Err(FeatureError::Cache(format!(
            "unsupported cache version {version}"
        )));
    }
    let _reserved = get_u16(r)?;
    let window_len = get_u32(r)? as usize;
    let dims = [get_u32(r)?, get_u32(r)?, get_u32(r)?, get_u32(r)?, get_u32(r)?];
    let expect = [
        MDCT_ROWS as u32,
        MDCT_COLS as u32,
        SCALEFAC_ROWS as u32,
        SCALEFAC_COLS as u32,
        N_SCALARS as u32,
    ];
    if dims != expect {
        return Err(FeatureError::Cache(format!(
            "tensor dims {dims:?} do not match this build ({expect:?})"
        )));
    }

    let n_sources = get_u32(r)? as usize;
    let mut sources = Vec::with_capacity(n_sources);
    for _ in 0..n_sources {
        let len = get_u32(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        sources.push(
            String::from_utf8(buf).map_err(|_| FeatureError::Cache("bad source path".into()))?,
        );
    }

    let n_windows = get_u64(r)? as usize;
    let mut windows = Vec::with_capacity(n_windows);
    let mut f32buf = |r: &mut dyn Read, n: usize| -> Result<Vec<f32>, FeatureError> {
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    for _ in 0..n_windows {
        let src = get_u32(r)? as usize;
        let start = get_u64(r)? as usize;
        let source = sources
            .get(src)
            .ok_or_else(|| FeatureError::Cache("source id out of range".into()))?
            .clone();
        let mut labels = vec![0u8; window_len];
        r.read_exact(&mut labels)?;

        let mdct = f32buf(r, window_len * MDCT_ROWS * MDCT_COLS)?;
        let sf = f32buf(r, window_len * SCALEFAC_ROWS * SCALEFAC_COLS)?;
        let scalars = f32buf(r, window_len * N_SCALARS)?;

        let features = (0..window_len)
            .map(|l| {
                let m = MDCT_ROWS * MDCT_COLS;
                let s = SCALEFAC_ROWS * SCALEFAC_COLS;
                FrameFeatures {
                    mdct_grid: Array2::from_shape_vec(
                        (MDCT_ROWS, MDCT_COLS),
                        mdct[l * m..(l + 1) * m].to_vec(),
                    )
                    .unwrap(),
                    scalefac_grid: Array2::from_shape_vec(
                        (SCALEFAC_ROWS, SCALEFAC_COLS),
                        sf[l * s..(l + 1) * s].to_vec(),
                    )
                    .unwrap(),
                    scalars: scalars[l * N_SCALARS..(l + 1) * N_SCALARS]
                        .try_into()
                        .unwrap(),
                }
            })
            .collect();
        windows.push(FeatureWindow {
            features,
            labels,
            origin: (source, start),
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_window(len: usize) -> impl Strategy<Value = FeatureWindow> {
        (
            proptest::collection::vec(-10.0f32..10.0, len * MDCT_ROWS * MDCT_COLS),
            proptest::collection::vec(0.0f32..64.0, len * SCALEFAC_ROWS * SCALEFAC_COLS),
            proptest::collection::vec(-4.0f32..4.0, len * N_SCALARS),
            proptest::collection::vec(0u8..=1, len),
            "[a-z]{1,12}\\.mp3",
            0usize..10_000,
        )
            .prop_map(move |(mdct, sf, sc, labels, src, start)| {
                let features = (0..len)
                    .map(|l| {
                        let m = MDCT_ROWS * MDCT_COLS;
                        let s = SCALEFAC_ROWS * SCALEFAC_COLS;
                        FrameFeatures {
                            mdct_grid: Array2::from_shape_vec(
                                (MDCT_ROWS, MDCT_COLS),
                                mdct[l * m..(l + 1) * m].to_vec(),
                            )
                            .unwrap(),
                            scalefac_grid: Array2::from_shape_vec(
                                (SCALEFAC_ROWS, SCALEFAC_COLS),
                                sf[l * s..(l + 1) * s].to_vec(),
                            )
                            .unwrap(),
                            scalars: sc[l * N_SCALARS..(l + 1) * N_SCALARS]
                                .try_into()
                                .unwrap(),
                        }
                    })
                    .collect();
                FeatureWindow {
                    features,
                    labels,
                    origin: (src, start),
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn cache_round_trips(windows in proptest::collection::vec(arb_window(4), 0..5)) {
            let mut buf = Vec::new();
            write_cache(&mut buf.by_ref(), &windows).unwrap();
            let back = read_cache(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(windows, back);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut data = b"NOPE".to_vec();
        data.extend_from_slice(&[0u8; 64]);
        assert!(read_cache(&mut data.as_slice()).is_err());
    }
}
