//! Fuse every view's depth map into one world-space cloud, drop statistical
//! outliers, label points by their nearest skeleton joint, and count how many
//! of each person's points survive the β visibility test per view.

use mvig::annotation::label_points_by_nearest_joint;
use mvig::geometry::{fuse_and_clean, fuse_views, visibility_filter, FusionView};
use mvig::scene::{generate_scene, RigConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rig = RigConfig {
        n_views: 4,
        ..RigConfig::default()
    };
    let scene = generate_scene(2, &rig, 0.5, 3)?;
    let views: Vec<FusionView<'_>> = scene
        .cameras
        .iter()
        .zip(&scene.views)
        .map(|(calib, v)| FusionView {
            depth: &v.depth,
            calib,
            rgb: Some(&v.rgb),
        })
        .collect();

    let raw = fuse_views(&views)?;
    let cloud = fuse_and_clean(&views, 20, 2.0)?;
    println!("fused {} points, {} after outlier removal", raw.len(), cloud.len());

    let labelled = label_points_by_nearest_joint(&cloud, &scene.skeletons())?;
    for beta in [0.05, 0.30] {
        for (calib, view) in scene.cameras.iter().zip(&scene.views) {
            let counts: Vec<String> = (0..scene.people.len())
                .map(|id| {
                    let pts: Vec<_> = labelled
                        .points
                        .iter()
                        .filter(|p| p.instance_id == Some(id))
                        .map(|p| p.position)
                        .collect();
                    let vis = visibility_filter(&pts, &view.depth, calib, beta).len();
                    format!("person {id}: {vis}/{}", pts.len())
                })
                .collect();
            println!("beta {beta:.2} m, view {}: {}", calib.view_id, counts.join(", "));
        }
    }
    Ok(())
}
