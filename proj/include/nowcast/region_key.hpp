/* Copyright 2026 The Nowcast Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <compare>
#include <string>

namespace nowcast {

// Adapter sets and threshold sweeps are keyed by (region, year).
struct RegionKey {
  int region = 0;
  int year = 0;
  auto operator<=>(const RegionKey&) const = default;
};

inline std::string to_string(const RegionKey& key) {
  return "r" + std::to_string(key.region) + "_y" + std::to_string(key.year);
}

}  // namespace nowcast
