//! Dataset directory layout:
//!
//! ```text
//! objects.json            ID → name
//! points.ply              labeled point cloud
//! tracks.json             per-point observations in training views
//! train/cameras.json      and test/cameras.json
//! train/images/view_NNN.ppm
//! train/ids/view_NNN.pgm
//! ```

use std::path::{Path, PathBuf};

use super::{
    read_cameras, read_idmap, read_labeled_ply, read_names, read_rgb, read_tracks, write_cameras, write_idmap,
    write_labeled_ply, write_names, write_rgb, write_tracks,
};
use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::train::TrainView;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self, root: &Path) -> PathBuf {
        root.join(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

pub fn view_name(i: usize) -> String {
    format!("view_{i:03}")
}

fn write_split(dir: &Path, views: &[TrainView]) -> Result<()> {
    let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
    write_cameras(&dir.join("cameras.json"), &cams)?;
    for (i, v) in views.iter().enumerate() {
        let name = view_name(i);
        write_rgb(&dir.join("images").join(format!("{name}.ppm")), v.camera.width, v.camera.height, &v.rgb)?;
        write_idmap(&dir.join("ids").join(format!("{name}.pgm")), &v.ids)?;
    }
    Ok(())
}

/// Reads a split's views; a missing split directory reads as empty.
pub fn read_split(dir: &Path) -> Result<Vec<TrainView>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let cams = read_cameras(&dir.join("cameras.json"))?;
    let mut views = Vec::with_capacity(cams.len());
    for (i, camera) in cams.into_iter().enumerate() {
        let name = view_name(i);
        let (w, h, rgb) = read_rgb(&dir.join("images").join(format!("{name}.ppm")))?;
        let ids = read_idmap(&dir.join("ids").join(format!("{name}.pgm")))?;
        if (w, h) != (camera.width, camera.height) || (ids.width, ids.height) != (w, h) {
            return Err(Error::Data(format!("{}: view {i} image sizes disagree with its camera", dir.display())));
        }
        views.push(TrainView { camera, rgb, ids });
    }
    Ok(views)
}

pub fn write_dataset(root: &Path, d: &Dataset) -> Result<()> {
    write_names(&root.join("objects.json"), &d.names)?;
    write_labeled_ply(&root.join("points.ply"), &d.cloud)?;
    write_tracks(&root.join("tracks.json"), &d.tracks)?;
    write_split(&Split::Train.dir(root), &d.train)?;
    if !d.test.is_empty() {
        write_split(&Split::Test.dir(root), &d.test)?;
    }
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let tracks_path = root.join("tracks.json");
    Ok(Dataset {
        names: read_names(&root.join("objects.json"))?,
        cloud: read_labeled_ply(&root.join("points.ply"))?,
        tracks: if tracks_path.exists() { read_tracks(&tracks_path)? } else { Default::default() },
        train: read_split(&Split::Train.dir(root))?,
        test: read_split(&Split::Test.dir(root))?,
    })
}
