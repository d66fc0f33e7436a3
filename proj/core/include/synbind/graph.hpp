#pragma once

#include <optional>
#include <string>
#include <vector>

#include "synbind/errors.hpp"

namespace synbind {

// Two objects with their attributes and an optional relation between them.
struct EvalGraph {
    std::string obj1, obj2;
    std::vector<std::string> attrs1, attrs2;
    std::optional<std::string> relation;  // directed obj1 -> obj2

    void validate() const {
        if (obj1.empty() || obj2.empty()) throw SchemaError("graph: object names must be non-empty");
    }

    EvalGraph with_swapped_attributes() const {
        EvalGraph g = *this;
        std::swap(g.attrs1, g.attrs2);
        return g;
    }
};

}  // namespace synbind
