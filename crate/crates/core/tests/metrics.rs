use ddinpaint_core::metrics::{
    evaluate_case, make_report, masked_mse, masked_psnr, masked_ssim, Aggregate, CaseMetrics, EvalSettings, SsimParams,
    SsimRegion, PSNR_CAP_DB,
};
use ddinpaint_core::volume::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SSIM at every voxel of one slice from the windowed sums written out.
fn ssim_at(a: &Volume, b: &Volume, z: usize, y: usize, x: usize, p: &SsimParams) -> f64 {
    let [_, h, w] = a.dims();
    let r = (p.window / 2) as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                let wt = (-((dy * dy) as f64) / (2.0 * p.sigma * p.sigma)).exp()
                    * (-((dx * dx) as f64) / (2.0 * p.sigma * p.sigma)).exp();
                taps.push((wt, a.get(z, yy as usize, xx as usize) as f64, b.get(z, yy as usize, xx as usize) as f64));
            }
        }
    }
    let mass: f64 = taps.iter().map(|t| t.0).sum();
    let mx = taps.iter().map(|t| t.0 * t.1).sum::<f64>() / mass;
    let my = taps.iter().map(|t| t.0 * t.2).sum::<f64>() / mass;
    let vx = taps.iter().map(|t| t.0 * (t.1 - mx).powi(2)).sum::<f64>() / mass;
    let vy = taps.iter().map(|t| t.0 * (t.2 - my).powi(2)).sum::<f64>() / mass;
    let cxy = taps.iter().map(|t| t.0 * (t.1 - mx) * (t.2 - my)).sum::<f64>() / mass;
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn random_case(rng: &mut ChaCha8Rng) -> (Volume, Volume, Volume) {
    let dims = [rng.random_range(1..4), rng.random_range(6..20), rng.random_range(6..20)];
    let n = dims.iter().product();
    let gt: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let noise = rng.random_range(0.0..0.3);
    let pred: Vec<f32> = gt.iter().map(|&g| (g + rng.random_range(-noise..=noise)).clamp(0.0, 1.0)).collect();
    let mut mask: Vec<f32> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    mask[rng.random_range(0..n)] = 1.0;
    (Volume::new(dims, pred).unwrap(), Volume::new(dims, gt).unwrap(), Volume::new(dims, mask).unwrap())
}

#[test]
fn direct_formula_oracles_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let p = SsimParams::default();
    for _ in 0..50 {
        let (pred, gt, mask) = random_case(&mut rng);
        let [d, h, w] = gt.dims();
        let (mut se, mut ss, mut n) = (0.0, 0.0, 0usize);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(z, y, x) == 1.0 {
                        se += ((pred.get(z, y, x) - gt.get(z, y, x)) as f64).powi(2);
                        ss += ssim_at(&pred, &gt, z, y, x, &p);
                        n += 1;
                    }
                }
            }
        }
        let mse = se / n as f64;
        let psnr = if mse == 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB) };
        assert!((masked_mse(&pred, &gt, &mask).unwrap() - mse).abs() < 1e-4);
        assert!((masked_psnr(&pred, &gt, &mask, 1.0).unwrap() - psnr).abs() < 1e-4);
        let got = masked_ssim(&pred, &gt, &mask, &p, SsimRegion::MaskAverage).unwrap();
        assert!((got - ss / n as f64).abs() < 1e-4, "{got} vs {}", ss / n as f64);
    }
}

#[test]
fn identity_scores_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, gt, mask) = random_case(&mut rng);
    for region in [SsimRegion::MaskAverage, SsimRegion::BoundingBox] {
        let settings = EvalSettings { region, ..EvalSettings::default() };
        let m = evaluate_case("id", &gt, &gt, &mask, &settings).unwrap();
        assert_eq!((m.ssim, m.psnr, m.mse), (1.0, PSNR_CAP_DB, 0.0));
    }
}

#[test]
fn bounding_box_region_scores_the_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (pred, gt, _) = random_case(&mut rng);
    let [d, h, w] = gt.dims();
    let mut m = vec![0.0f32; d * h * w];
    for y in 2..5 {
        for x in 1..4 {
            m[y * w + x] = 1.0;
        }
    }
    let mask = Volume::new([d, h, w], m).unwrap();
    let crop = |v: &Volume| Volume::new([1, 3, 3], (2..5).flat_map(|y| (1..4).map(move |x| (y, x))).map(|(y, x)| v.get(0, y, x)).collect()).unwrap();
    let ones = Volume::new([1, 3, 3], vec![1.0; 9]).unwrap();
    let p = SsimParams::default();
    let want = masked_ssim(&crop(&pred), &crop(&gt), &ones, &p, SsimRegion::MaskAverage).unwrap();
    let got = masked_ssim(&pred, &gt, &mask, &p, SsimRegion::BoundingBox).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn aggregate_renders_like_the_published_table() {
    assert_eq!(Aggregate { mean: 0.8271, std: 0.1308 }.to_string(), "0.8271 [±0.1308]");
    assert_eq!(Aggregate { mean: 20.49494, std: 3.0 }.to_string(), "20.4949 [±3.0000]");
    let cases = vec![
        CaseMetrics { case_id: "a".into(), ssim: 0.7, psnr: 20.0, mse: 0.01 },
        CaseMetrics { case_id: "b".into(), ssim: 0.9, psnr: 24.0, mse: 0.03 },
    ];
    let r = make_report(cases).unwrap();
    assert_eq!(r.ssim.to_string(), "0.8000 [±0.1000]");
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "case_id,ssim,psnr,mse");
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("mean,0.800000,22.000000,0.020000"));
    assert!(make_report(Vec::new()).is_err());
}
