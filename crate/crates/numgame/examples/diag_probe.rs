//! Diagnose why training stalls: inspect embeddings, scores, and whether a
//! single episode can be overfitted.

use diffcore::{Adam, AdamConfig, GradBuffer, Graph, Tensor};
use numgame::agents::{AgentConfig, Agents, ChannelKind};
use numgame::game::{assemble_episode, Condition, GameConfig, SplitSelector};
use numgame::stimuli::{Dataset, DatasetSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let spec = DatasetSpec {
        classes: vec![1, 2, 3, 4, 5],
        counts: vec![12; 5],
        canvas_side: 64,
        area_range: (0.05, 0.10),
        train_fraction: 0.8,
        seed: 1,
    };
    let data = Dataset::build(&spec).unwrap();
    let mut acfg = AgentConfig::default_for(ChannelKind::Discrete);
    acfg.vocab = 3;
    acfg.max_len = 5;
    acfg.variable_length = false;
    let agents: Agents<f32> = Agents::new(acfg.clone(), 0);

    // 1. Embedding geometry on raw images.
    let e1 = agents.encode(&data.class(1).unwrap().images[0].canvas).unwrap();
    let e2 = agents.encode(&data.class(5).unwrap().images[0].canvas).unwrap();
    let e3 = agents.encode(&data.class(1).unwrap().images[1].canvas).unwrap();
    let d = |a: &[f32], b: &[f32]| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
    };
    let norm = |a: &[f32]| a.iter().map(|x| x * x).sum::<f32>().sqrt();
    println!("|e1|={:.4} |e2|={:.4}", norm(&e1), norm(&e2));
    println!("d(1a,5a)={:.6} d(1a,1b)={:.6}", d(&e1, &e2), d(&e1, &e3));
    println!("e1[..6]={:?}", &e1[..6]);
    println!("e2[..6]={:?}", &e2[..6]);

    // 2. Eval scores for a hand-built candidate set.
    let msg = agents.send_discrete(&e1).unwrap();
    println!("msg tokens={:?}", msg.tokens);
    let cands: Vec<Vec<f32>> = (1..=5)
        .map(|c| agents.encode(&data.class(c).unwrap().images[0].canvas).unwrap())
        .collect();
    let scores = agents.receive_discrete(&msg.tokens, &cands).unwrap();
    println!("scores={scores:?}");

    // 3. Overfit a single Diff episode for 60 steps.
    let mut cfg = GameConfig::default_discrete();
    cfg.variable_length = false;
    cfg.lambda = 0.0;
    let mut agents: Agents<f32> = Agents::new(acfg, 0);
    let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &agents.params);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ep = assemble_episode(&data, &[1, 2, 3, 4, 5], 5, Condition::Diff, SplitSelector::Train, &mut rng)
        .unwrap();
    let mut rng_g = ChaCha8Rng::seed_from_u64(8);
    for step in 0..60 {
        let mut g: Graph<f32> = Graph::new();
        let mut bind = diffcore::Binding::new(&agents.params);
        let mut encoded = std::collections::BTreeMap::new();
        let mut enc = |g: &mut Graph<f32>, bind: &mut diffcore::Binding, key: (u32, usize)| {
            *encoded.entry(key).or_insert_with(|| {
                let img = &data.class(key.0).unwrap().images[key.1];
                let x = agents.image_input(g, &img.canvas).unwrap();
                agents.encode_node(g, bind, x)
            })
        };
        let cand_nodes: Vec<_> = ep.candidate_refs.iter().map(|&r| enc(&mut g, &mut bind, r)).collect();
        let se = enc(&mut g, &mut bind, ep.sender_ref);
        let rollout = agents.sender_rollout(&mut g, &mut bind, se, Some((1.0, &mut rng_g))).unwrap();
        let scores = agents
            .receiver_scores(&mut g, &mut bind, &rollout.onehot_nodes, &rollout.tokens, &cand_nodes)
            .unwrap();
        // Hinge by hand so intermediate scores stay visible.
        let st = scores[ep.target_index];
        let mut loss = g.input(Tensor::scalar(0.0f32));
        for (j, &s) in scores.iter().enumerate() {
            if j != ep.target_index {
                let diffn = g.sub(s, st);
                let m = g.add_scalar(diffn, 1.0f32);
                let h = g.relu(m);
                loss = g.add(loss, h);
            }
        }
        let lv = g.value(loss).item();
        if step % 10 == 0 || step == 59 {
            let sv: Vec<f32> = scores.iter().map(|&s| g.value(s).item()).collect();
            println!("step {step:2} loss {lv:.4} scores {sv:?} tokens {:?}", rollout.tokens);
        }
        g.backward(loss).unwrap();
        let mut grads = GradBuffer::zeros_like(&agents.params);
        bind.accumulate_grads(&g, &mut grads);
        // Report gradient magnitude per parameter group once.
        if step == 0 {
            for (pid, buf) in grads.iter() {
                let gn = buf.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
                let name = agents.params.name(pid);
                if name.ends_with(".w") || name.ends_with(".wx") {
                    println!("  |grad {name}| = {gn:.6}");
                }
            }
        }
        adam.step(&mut agents.params, &grads);
    }
}
