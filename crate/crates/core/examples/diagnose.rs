//! Scratch diagnostic: inspect pooling sharpness and class/patch cosine
//! structure of a trained checkpoint.
//! Usage: diagnose <dataset_dir> <checkpoint> <vocab>

use conceptseg::align::{pool_visual_concept, project_text, text_concept_repr};
use conceptseg::autodiff::Tape;
use conceptseg::defaults;
use conceptseg::encoders::{encode_text, HandcraftedFeaturizer, VisionProvider};
use conceptseg::eval::embed_classes;
use conceptseg::synth;
use conceptseg::text::{extract_concepts, BpeVocab, ExtractOptions};
use conceptseg::train::load_checkpoint;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = Path::new(&args[0]);
    let state = load_checkpoint(Path::new(&args[1])).unwrap();
    let vocab = BpeVocab::load(Path::new(&args[2])).unwrap();
    let provider = VisionProvider::Handcrafted(HandcraftedFeaturizer::new(8, state.d_v).unwrap());
    let bank = defaults::bank_easy();
    let lex = defaults::lexicon_easy();
    let class_names = synth::read_class_names(data).unwrap();
    let scenes = synth::load_split(data, "test").unwrap();

    let embeds = embed_classes(&state.text, &state.proj, &vocab, &class_names, &defaults::templates_desk()).unwrap();

    // 1. Class-embedding pairwise cosines.
    println!("class embedding cosines:");
    for i in 0..class_names.len() {
        let mut row = String::new();
        for j in 0..class_names.len() {
            let dot: f32 = embeds.matrix[i].iter().zip(&embeds.matrix[j]).map(|(a, b)| a * b).sum();
            row.push_str(&format!("{dot:6.3} "));
        }
        println!("  {:>8}: {row}", class_names[i]);
    }

    // 2. Mean cosine of class embedding vs its own object patches vs other
    //    patches, over test scenes.
    let mut own = vec![(0.0f64, 0usize); class_names.len()];
    let mut other = vec![(0.0f64, 0usize); class_names.len()];
    let mut bg = vec![(0.0f64, 0usize); class_names.len()];
    for scene in scenes.iter().take(100) {
        let repr = provider.encode(&scene.image, None).unwrap();
        let (n, d) = repr.dense.dims2().unwrap();
        let grid_cols = repr.grid.1;
        for p in 0..n {
            let row = &repr.dense.data()[p * d..(p + 1) * d];
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-9);
            // Majority mask label of the patch.
            let (pr, pc) = (p / grid_cols, p % grid_cols);
            let mut counts = [0usize; 16];
            for y in pr * 8..(pr + 1) * 8 {
                for x in pc * 8..(pc + 1) * 8 {
                    counts[scene.mask.get(x, y) as usize] += 1;
                }
            }
            let label = counts.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
            for (c, emb) in embeds.matrix.iter().enumerate() {
                let cos: f32 = row.iter().zip(emb).map(|(a, b)| a * b).sum::<f32>() / norm;
                if label == 0 {
                    bg[c].0 += cos as f64;
                    bg[c].1 += 1;
                } else if label - 1 == c {
                    own[c].0 += cos as f64;
                    own[c].1 += 1;
                } else {
                    other[c].0 += cos as f64;
                    other[c].1 += 1;
                }
            }
        }
    }
    println!("\nmean patch cosine per class (own / other-object / background):");
    for (c, name) in class_names.iter().enumerate() {
        println!(
            "  {name:>8}: {:6.3} / {:6.3} / {:6.3}",
            own[c].0 / own[c].1.max(1) as f64,
            other[c].0 / other[c].1.max(1) as f64,
            bg[c].0 / bg[c].1.max(1) as f64
        );
    }

    // 3. Pooling weight concentration for the first few scene concepts.
    println!("\npooling sharpness (max weight, entropy) and projected-query norm:");
    for scene in scenes.iter().take(5) {
        let tc = extract_concepts(&vocab, &lex, &bank, &scene.entry.caption, ExtractOptions::default());
        let mut tape = Tape::new();
        let text_vars = state.text.register(&mut tape, false);
        let proj_vars = state.proj.register(&mut tape, false);
        let repr = provider.encode(&scene.image, None).unwrap();
        let z_v = tape.constant(repr.dense.clone());
        let text_repr = encode_text(&mut tape, &state.text.config, &text_vars, &tc).unwrap();
        for concept in &tc.concepts {
            let c_t = text_concept_repr(&mut tape, text_repr.dense, &concept.token_indices).unwrap();
            let c_proj = project_text(&mut tape, &proj_vars, c_t).unwrap();
            let qn: f32 = tape.value(c_proj).data().iter().map(|v| v * v).sum::<f32>().sqrt();
            // Reproduce the pooling softmax to inspect the weights.
            let d = state.d_v;
            let query = tape.reshape(c_proj, vec![d, 1]).unwrap();
            let sims = tape.matmul(z_v, query).unwrap();
            let w = tape.softmax(sims, 0, 0.1).unwrap();
            let weights = tape.value(w).data().to_vec();
            let maxw = weights.iter().cloned().fold(0.0f32, f32::max);
            let entropy: f32 = -weights.iter().filter(|&&p| p > 1e-9).map(|&p| p * p.ln()).sum::<f32>();
            let _ = pool_visual_concept(&mut tape, z_v, c_proj, 0.1).unwrap();
            println!(
                "  {:>10} |q|={qn:5.2} max_w={maxw:5.3} H={entropy:5.2} (uniform H={:.2})",
                concept.concept,
                (weights.len() as f32).ln()
            );
        }
    }
}
