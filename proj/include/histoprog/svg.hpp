#pragma once

// Small SVG emitters for the pipeline figures.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "histoprog/mil.hpp"
#include "histoprog/relevance.hpp"
#include "histoprog/stats.hpp"

namespace histoprog::svg {

/// "#rrggbb" for a decision score: white at 0, red for negative, blue for
/// positive, intensity |s| / max_abs.
std::string score_color(double score, double max_abs);

/// One rect per tile on its grid cell.
std::string heatmap(std::span<const TileScore> tiles, int cell_px = 8);

/// Step functions per group with censoring ticks.
std::string kaplan_meier(const std::map<std::string, SurvivalCurve>& curves);

/// One panel per hospital, one bar per pattern in the given order; blue for
/// longer-associated patterns, red for shorter.
std::string pattern_bars(std::span<const SelectedPattern> patterns, std::span<const std::string> hospitals);

}  // namespace histoprog::svg
