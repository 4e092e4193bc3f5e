use numgame::stimuli::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
fn main() {
    // OOD classes at canvas 64: how long to make 40 of each?
    for n in [6u32, 7, 8, 10, 15, 20] {
        let t0 = std::time::Instant::now();
        let mut ok = 0;
        let mut fail = None;
        for i in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * n as u64 + i);
            match generate_dot_image(n, 64, (0.05, 0.10), &mut rng) {
                Ok(img) => { img.validate((0.05, 0.10)).unwrap(); ok += 1; }
                Err(e) => { fail = Some(format!("{e}")); break; }
            }
        }
        match fail {
            None => println!("n={n}: 40 images in {:?}", t0.elapsed()),
            Some(e) => println!("n={n}: failed after {ok}: {e}"),
        }
    }
    // n=15 and 20 on a 128 canvas (for interest)
    for n in [15u32, 20] {
        let t0 = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        match generate_dot_image(n, 128, (0.05, 0.10), &mut rng) {
            Ok(_) => println!("n={n} @128: ok in {:?}", t0.elapsed()),
            Err(e) => println!("n={n} @128: {e}"),
        }
    }
}
