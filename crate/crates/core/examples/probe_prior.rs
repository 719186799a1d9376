use crossview_core::synth::{generate_split, Split, SynthConfig};
fn main() {
    let sc = SynthConfig::default();
    let train = generate_split(1, Split::Train, 512, &sc).unwrap();
    let test = generate_split(1, Split::Test, 128, &sc).unwrap();
    let cells = 64;
    let mut counts = vec![[0u32; 4]; cells];
    for p in &train { for (i, c) in p.ground_labels.argmax().iter().enumerate() { counts[i][*c as usize] += 1; } }
    let prior: Vec<u8> = counts.iter().map(|c| (0..4).max_by_key(|&k| (c[k], 4 - k)).unwrap() as u8).collect();
    let mut ok = 0; let mut n = 0;
    let mut row_hist = vec![[0u32; 4]; 4];
    for p in &test { for (i, c) in p.ground_labels.argmax().iter().enumerate() { n += 1; if prior[i] == *c { ok += 1; } row_hist[i / 16][*c as usize] += 1; } }
    println!("prior acc {}", ok as f64 / n as f64);
    println!("row hist (road veg man sky) {:?}", row_hist);
}
