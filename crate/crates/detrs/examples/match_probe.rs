// scratch: anchor coverage of the synthetic shapes
use detrs::datapipe::{synth_shapes, Dataset};
use detrs::geometry::{generate_anchors, match_targets, Assignment};

fn main() {
    let anchors = generate_anchors((512, 512), 3.0, &[1.0, 2.0, 0.5]).unwrap().all_boxes();
    let ds = synth_shapes(8, 7);
    let mut total = 0;
    let mut covered = 0;
    let mut pos_total = 0;
    for i in 0..ds.len() {
        let s = ds.get(i).unwrap();
        let m = match_targets(&anchors, &s.boxes, 0.5, 0.4);
        let mut has_pos = vec![false; s.boxes.len()];
        for a in &m.assignments {
            if let Assignment::Positive(g) = a {
                has_pos[*g] = true;
                pos_total += 1;
            }
        }
        total += s.boxes.len();
        covered += has_pos.iter().filter(|x| **x).count();
        for (gi, h) in has_pos.iter().enumerate() {
            if !h {
                let b = s.boxes.get(gi);
                println!("image {i} gt {gi} UNMATCHED: {:?} area {:.0} class {}", b, s.boxes.area(gi), s.class_ids[gi]);
            }
        }
    }
    println!("covered {covered}/{total} gt, {pos_total} positive anchors");
}
