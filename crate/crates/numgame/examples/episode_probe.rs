//! Timing probe: one full discrete-channel training episode at canvas 64.

use diffcore::graph::{Binding, Graph};
use diffcore::{GradBuffer, Real};
use numgame::agents::{AgentConfig, Agents, ChannelKind};
use numgame::stimuli::generate_dot_image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = AgentConfig::default_for(ChannelKind::Discrete);
    let agents: Agents<f32> = Agents::new(cfg.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let imgs: Vec<_> = (1..=5)
        .map(|n| generate_dot_image(n, 64, (0.05, 0.10), &mut rng).unwrap().canvas)
        .collect();

    let mut grads = GradBuffer::zeros_like(&agents.params);
    let reps = 20;

    // Warm-up + timed loop.
    for phase in 0..2 {
        let t0 = Instant::now();
        for rep in 0..reps {
            let mut g: Graph<f32> = Graph::new();
            let mut bind = Binding::new(&agents.params);
            // Same condition: target is candidate 0; 5 encodes total.
            let cand_nodes: Vec<_> = imgs
                .iter()
                .map(|im| {
                    let x = agents.image_input(&mut g, im).unwrap();
                    agents.encode_node(&mut g, &mut bind, x)
                })
                .collect();
            let e = cand_nodes[rep % 5];
            let rollout = agents
                .sender_rollout(&mut g, &mut bind, e, Some((1.0f32, &mut rng)))
                .unwrap();
            let scores = agents
                .receiver_scores(&mut g, &mut bind, &rollout.onehot_nodes, &rollout.tokens, &cand_nodes)
                .unwrap();
            // Multi-class hinge around the target.
            let target = rep % 5;
            let mut loss = None;
            for (j, &s) in scores.iter().enumerate() {
                if j == target {
                    continue;
                }
                let st = scores[target];
                let diff = g.sub(s, st);
                let m = g.add_scalar(diff, 1.0);
                let h = g.relu(m);
                loss = Some(match loss {
                    None => h,
                    Some(l) => g.add(l, h),
                });
            }
            let mut loss = loss.unwrap();
            if let Some(el) = rollout.expected_len {
                let pen = g.mul_scalar(el, 0.005);
                loss = g.add(loss, pen);
            }
            g.backward(loss).unwrap();
            bind.accumulate_grads(&g, &mut grads);
        }
        let dt = t0.elapsed();
        if phase == 1 {
            println!(
                "episode fwd+bwd: {:.1} ms  ({} reps in {:?})",
                dt.as_secs_f64() * 1000.0 / reps as f64,
                reps,
                dt
            );
        }
    }

    // Eval-mode pieces: encode once, send+receive.
    let t0 = Instant::now();
    let reps2 = 50;
    for _ in 0..reps2 {
        let _ = agents.encode(&imgs[2]).unwrap();
    }
    println!("eval encode: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps2 as f64);

    let e = agents.encode(&imgs[2]).unwrap();
    let cands: Vec<_> = imgs.iter().map(|im| agents.encode(im).unwrap()).collect();
    let t0 = Instant::now();
    for _ in 0..reps2 {
        let m = agents.send_discrete(&e).unwrap();
        let _ = agents.receive_discrete(&m.tokens, &cands).unwrap();
    }
    println!("eval send+receive (cached embeddings): {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps2 as f64);
    let _ = f32::ZERO;
}
