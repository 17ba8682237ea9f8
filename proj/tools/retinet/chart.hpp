#pragma once

#include <vector>

#include "retinet/image.hpp"
#include "retinet/trainer.hpp"

namespace retinet::cli {

// Two panels, loss on the left and accuracy on the right. Training series in
// blue, validation in orange. Axes only, no text.
Image8 render_curves(const std::vector<EpochLog>& logs, std::size_t width = 800, std::size_t height = 360);

}  // namespace retinet::cli
