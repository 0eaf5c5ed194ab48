//! Lays out a small interleaved sequence, packs two copies of it into one row
//! and prints the resulting attention mask.

use emcot::tokenstream::{build_attention_mask, canonical_toy_sequence, pack_samples, MaskOptions, Role};

fn tag(role: Role) -> char {
    match role {
        Role::Text => 'T',
        Role::VisUnd => 'U',
        Role::VisClean => 'C',
        Role::VisNoise => 'V',
        Role::ActNoise => 'A',
    }
}

fn main() -> emcot::Result<()> {
    let records = canonical_toy_sequence();
    let mask = build_attention_mask(&records, &MaskOptions::default());
    let roles: String = records.iter().map(|r| tag(r.role)).collect();
    println!("roles: {roles}  (T text, U understanding, C clean latent, V subgoal noise, A action noise)");
    for (i, r) in records.iter().enumerate() {
        let row: String = mask.row(i).iter().map(|&a| if a { '#' } else { '.' }).collect();
        println!("{} {row}", tag(r.role));
    }
    println!("{} of {} pairs allowed", mask.count(), records.len() * records.len());

    let mut second = canonical_toy_sequence();
    for r in &mut second {
        r.sample = 1;
    }
    let packs = pack_samples(vec![records.clone(), second], 64, &MaskOptions::default())?;
    let p = &packs[0];
    println!("\npacked {} samples into {} records:", p.samples.len(), p.len());
    for i in 0..p.len() {
        let row: String = p.mask.row(i).iter().map(|&a| if a { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    Ok(())
}
