use numgame::stimuli::*;
fn main() {
    let spec = DatasetSpec {
        classes: vec![1, 2, 3, 4, 5],
        counts: vec![700; 5],
        canvas_side: 64,
        area_range: (0.05, 0.10),
        train_fraction: 0.85,
        seed: 0,
    };
    let t0 = std::time::Instant::now();
    let ds = Dataset::build(&spec).unwrap();
    println!("built {} images in {:?}", ds.total_images(), t0.elapsed());
    // mean black fraction per class + correlation n vs fraction
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for cs in &ds.classes {
        let mean: f64 = cs.images.iter().map(|i| i.black_fraction).sum::<f64>() / cs.images.len() as f64;
        println!("class {}: mean ink {:.4}", cs.class, mean);
        for img in &cs.images {
            xs.push(cs.class as f64);
            ys.push(img.black_fraction);
        }
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0; let mut sxx = 0.0; let mut syy = 0.0;
    for i in 0..xs.len() {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    println!("corr(n, ink) = {:.4}", sxy / (sxx * syy).sqrt());
    let t1 = std::time::Instant::now();
    for cs in &ds.classes { for img in &cs.images { img.validate(spec.area_range).unwrap(); } }
    println!("validated all in {:?}", t1.elapsed());
}
