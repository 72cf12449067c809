#pragma once

#include "medgrpo/nn.hpp"

namespace medgrpo {

/// One modality's observed time series, time x features.
struct ModalitySeries {
  int modality_id = 0;
  nn::Matrix data;

  int length() const { return static_cast<int>(data.rows()); }
  int width() const { return static_cast<int>(data.cols()); }
};

}  // namespace medgrpo
