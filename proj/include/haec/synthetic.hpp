#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "haec/cloud.hpp"
#include "haec/embed.hpp"
#include "haec/superpoint.hpp"

namespace haec {

// Palette of the demo scene: red things, green ground, black background.
std::vector<PaletteEntry> demo_palette();
// Evaluation label set; gt_semantic indexes into it.
std::vector<std::string> demo_label_set();

struct DemoSceneParams {
  double ground_size = 20.0;     // square side, meters
  double ground_spacing = 0.25;
  int blobs = 3;
  double blob_radius = 0.8;
  double blob_height = 2.0;      // sphere centers above the ground plane
  double blob_spacing = 0.15;    // approximate surface sample spacing
};

// Ground plane (stuff, class 1) with spherical blobs (things, class 0,
// instance = blob index). Positions carry a tiny seeded jitter.
PointCloud demo_scene(std::uint64_t seed, const DemoSceneParams& params = {});

// Random hierarchy for model tests: S level-1 superpoints over 2S points,
// coarser levels group consecutive superpoints in threes.
SuperpointHierarchy toy_hierarchy(std::size_t S, std::size_t C, int levels, std::uint64_t seed);

}  // namespace haec
