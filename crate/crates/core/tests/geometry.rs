mod common;

use common::*;

#[test]
fn box_cells_project_onto_matching_pixels() {
    let cams = rig();
    for seed in 0..5 {
        let st = geometric_consistency(seed, &cams);
        eprintln!("scene {seed}: {st:?} {:.4}", st.ratio());
        assert!(st.unoccluded >= 20, "scene {seed}: {st:?}");
        assert!(st.ratio() >= 0.95, "scene {seed}: {st:?}");
    }
}
