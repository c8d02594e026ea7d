use charformer_core::image::ImageTensor;
use charformer_core::morphology::{binarize, otsu_threshold, skeletonize, BinaryImage, Polarity};
use charformer_core::synth::{render_glyph, GlyphSpec};
use proptest::prelude::*;

/// Brute-force Otsu: score every cut of the 256-bin histogram from scratch.
fn otsu_oracle(values: &[f32]) -> f32 {
    let bins: Vec<usize> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as usize)
        .collect();
    let mut best = (0usize, -1.0f64);
    for t in 0..255 {
        let (dark, light): (Vec<f64>, Vec<f64>) = {
            let d: Vec<f64> = bins.iter().filter(|&&b| b <= t).map(|&b| b as f64).collect();
            let l: Vec<f64> = bins.iter().filter(|&&b| b > t).map(|&b| b as f64).collect();
            (d, l)
        };
        if dark.is_empty() || light.is_empty() {
            continue;
        }
        let n = bins.len() as f64;
        let (w0, w1) = (dark.len() as f64 / n, light.len() as f64 / n);
        let m0 = dark.iter().sum::<f64>() / dark.len() as f64;
        let m1 = light.iter().sum::<f64>() / light.len() as f64;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best.1 + 1e-9 {
            best = (t, between);
        }
    }
    (best.0 as f32 + 0.5) / 255.0
}

#[test]
fn ramp_threshold_matches_histogram_scan() {
    let ramp = ImageTensor::from_fn(8, 8, 1, |y, x, _| {
        let v = (y * 8 + x) as f32 / 63.0;
        (v * v * 255.0).round() / 255.0
    });
    assert_eq!(otsu_threshold(&ramp).unwrap(), otsu_oracle(ramp.data()));
}

#[test]
fn antialiased_edge_matches_oracle_comparison() {
    // a soft vertical edge with every intermediate gray level
    let img = ImageTensor::from_fn(16, 32, 1, |_, x, _| {
        (((x as f32 - 8.0) / 16.0).clamp(0.0, 1.0) * 255.0).round() / 255.0
    });
    let threshold = otsu_oracle(img.data());
    let mask = binarize(&img, Polarity::DarkOnLight).unwrap();
    for y in 0..16 {
        for x in 0..32 {
            assert_eq!(mask.get(y, x), img.get(y, x, 0) < threshold, "({y},{x})");
        }
    }
}

/// Textbook Zhang–Suen on nested vectors with an explicit zero border.
fn zhang_suen_oracle(rows: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let h = rows.len() + 2;
    let w = rows[0].len() + 2;
    let mut g = vec![vec![0u8; w]; h];
    for (y, row) in rows.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            g[y + 1][x + 1] = v;
        }
    }
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut kill = vec![];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    if g[y][x] == 0 {
                        continue;
                    }
                    let p2 = g[y - 1][x];
                    let p3 = g[y - 1][x + 1];
                    let p4 = g[y][x + 1];
                    let p5 = g[y + 1][x + 1];
                    let p6 = g[y + 1][x];
                    let p7 = g[y + 1][x - 1];
                    let p8 = g[y][x - 1];
                    let p9 = g[y - 1][x - 1];
                    let ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2];
                    let b: u8 = ring[..8].iter().sum();
                    let a = ring.windows(2).filter(|w| w[0] == 0 && w[1] == 1).count();
                    let ok = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if (2..=6).contains(&b) && a == 1 && ok {
                        kill.push((y, x));
                    }
                }
            }
            for (y, x) in &kill {
                g[*y][*x] = 0;
            }
            changed |= !kill.is_empty();
        }
        if !changed {
            break;
        }
    }
    g[1..h - 1].iter().map(|r| r[1..w - 1].to_vec()).collect()
}

#[test]
fn bar_skeleton_matches_textbook_zhang_suen() {
    // 3×9 bar with one pixel of padding around it
    let bar = BinaryImage::from_fn(5, 11, |y, x| (1..4).contains(&y) && (1..10).contains(&x));
    let rows: Vec<Vec<u8>> = (0..5)
        .map(|y| (0..11).map(|x| bar.get(y, x) as u8).collect())
        .collect();
    let expected = zhang_suen_oracle(&rows);
    let got = skeletonize(&bar);
    for y in 0..5 {
        for x in 0..11 {
            assert_eq!(got.get(y, x) as u8, expected[y][x], "({y},{x})");
        }
    }
    // one pixel thick, on the middle row, one component
    for y in [0, 1, 3, 4] {
        assert!((0..11).all(|x| !got.get(y, x)));
    }
    assert!(got.count() >= 5);
    assert_eq!(got.count_components(), 1);
}

fn glyph_masks() -> impl Iterator<Item = BinaryImage> {
    (0..100u64).map(|seed| {
        let img = render_glyph(&GlyphSpec {
            num_strokes: 2 + (seed % 7) as usize,
            stroke_width: 2 + (seed % 5) as usize,
            canvas: 64,
            seed,
        })
        .unwrap();
        binarize(&img.quantize(), Polarity::DarkOnLight).unwrap()
    })
}

#[test]
fn glyph_skeletons_are_thin_connected_subsets() {
    for (i, mask) in glyph_masks().enumerate() {
        let skel = skeletonize(&mask);
        assert!(skel.is_subset_of(&mask), "glyph {i}");
        assert!(!skel.has_solid_2x2(), "glyph {i}");
        assert_eq!(skel.count_components(), mask.count_components(), "glyph {i}");
        assert_eq!(skeletonize(&skel), skel, "glyph {i}");
    }
}

fn arb_mask() -> impl Strategy<Value = BinaryImage> {
    (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
        proptest::collection::vec(prop::bool::weighted(0.6), h * w).prop_map(move |bits| {
            BinaryImage::from_raw(h, w, bits.into_iter().map(u8::from).collect()).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn skeleton_is_subset(mask in arb_mask()) {
        prop_assert!(skeletonize(&mask).is_subset_of(&mask));
    }

    #[test]
    fn skeleton_is_idempotent(mask in arb_mask()) {
        let once = skeletonize(&mask);
        prop_assert_eq!(skeletonize(&once), once);
    }

    // A 2×2 block can survive only where every pixel carries topology, e.g.
    // the centre of an X whose four arms each hang off one corner.
    #[test]
    fn surviving_solid_blocks_are_topologically_pinned(mask in arb_mask()) {
        let skel = skeletonize(&mask);
        let (h, w) = (skel.height(), skel.width());
        let base = topology(&skel);
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let block = [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)];
                if block.iter().all(|&(by, bx)| skel.get(by, bx)) {
                    for (by, bx) in block {
                        let mut probe = skel.clone();
                        probe.set(by, bx, false);
                        prop_assert_ne!(topology(&probe), base, "({}, {}) is removable", by, bx);
                    }
                }
            }
        }
    }
}

/// (8-connected foreground components, 4-connected background components
/// including a one-pixel frame around the image).
fn topology(img: &BinaryImage) -> (usize, usize) {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && y < h && x < w && img.get(y as usize, x as usize);
    let count = |want: bool, diag: bool| {
        let (ph, pw) = ((h + 2) as usize, (w + 2) as usize);
        let mut seen = vec![false; ph * pw];
        let mut n = 0;
        for sy in -1..=h {
            for sx in -1..=w {
                let si = ((sy + 1) as usize) * pw + (sx + 1) as usize;
                if seen[si] || fg(sy, sx) != want {
                    continue;
                }
                n += 1;
                seen[si] = true;
                let mut stack = vec![(sy, sx)];
                while let Some((cy, cx)) = stack.pop() {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            if (dy, dx) == (0, 0) || (!diag && dy != 0 && dx != 0) {
                                continue;
                            }
                            let (ny, nx) = (cy + dy, cx + dx);
                            if ny < -1 || nx < -1 || ny > h || nx > w || fg(ny, nx) != want {
                                continue;
                            }
                            let ni = ((ny + 1) as usize) * pw + (nx + 1) as usize;
                            if !seen[ni] {
                                seen[ni] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
            }
        }
        n
    };
    (count(true, true), count(false, false))
}

#[test]
fn x_centre_block_is_kept() {
    let rows = ["0100100", "0011000", "0011000", "0100100"];
    let mask = BinaryImage::from_fn(4, 7, |y, x| rows[y].as_bytes()[x] == b'1');
    let skel = skeletonize(&mask);
    assert_eq!(skel, mask);
    assert!(skel.has_solid_2x2());
}
