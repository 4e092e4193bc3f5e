//! Phase timing: forward build vs backward vs grad accumulation.
use diffcore::graph::{Binding, Graph};
use diffcore::GradBuffer;
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
    let (mut t_fwd, mut t_bwd, mut t_acc) = (0.0f64, 0.0, 0.0);
    for phase in 0..2 {
        if phase == 1 { t_fwd = 0.0; t_bwd = 0.0; t_acc = 0.0; }
        for rep in 0..reps {
            let t0 = Instant::now();
            let mut g: Graph<f32> = Graph::new();
            let mut bind = Binding::new(&agents.params);
            let cand_nodes: Vec<_> = imgs.iter().map(|im| {
                let x = agents.image_input(&mut g, im).unwrap();
                agents.encode_node(&mut g, &mut bind, x)
            }).collect();
            let e = cand_nodes[rep % 5];
            let rollout = agents.sender_rollout(&mut g, &mut bind, e, Some((1.0f32, &mut rng))).unwrap();
            let scores = agents.receiver_scores(&mut g, &mut bind, &rollout.onehot_nodes, &rollout.tokens, &cand_nodes).unwrap();
            let target = rep % 5;
            let mut loss = None;
            for (j, &s) in scores.iter().enumerate() {
                if j == target { continue; }
                let st = scores[target];
                let diff = g.sub(s, st);
                let m = g.add_scalar(diff, 1.0);
                let h = g.relu(m);
                loss = Some(match loss { None => h, Some(l) => g.add(l, h) });
            }
            let loss = loss.unwrap();
            t_fwd += t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            g.backward(loss).unwrap();
            t_bwd += t1.elapsed().as_secs_f64();
            let t2 = Instant::now();
            bind.accumulate_grads(&g, &mut grads);
            t_acc += t2.elapsed().as_secs_f64();
        }
    }
    println!("forward+build: {:.1} ms", t_fwd * 1000.0 / reps as f64);
    println!("backward:      {:.1} ms", t_bwd * 1000.0 / reps as f64);
    println!("accumulate:    {:.2} ms", t_acc * 1000.0 / reps as f64);
}
