#pragma once

#include <Eigen/Dense>

#include "holoseg/core.hpp"

namespace holoseg {

/// (mu, sigma^2) feature representative of one thing instance or one stuff
/// class, matched to pixel embeddings by the association score.
struct Prototype {
    enum class Kind { Thing, Stuff };

    Eigen::VectorXd mu;
    double var = 1.0;
    Kind kind = Kind::Stuff;
    int class_id = -1;     // stuff class, or the seed class read at a center
    int instance_id = 0;   // things only
    int center_row = -1;   // things: the pixel the prototype was read from
    int center_col = -1;

    static Prototype stuff(Eigen::VectorXd mu, double var, int class_id) {
        Prototype p;
        p.mu = std::move(mu);
        p.var = var;
        p.kind = Kind::Stuff;
        p.class_id = class_id;
        return p;
    }
    static Prototype thing(Eigen::VectorXd mu, double var, int instance_id, int seed_class,
                           int row, int col) {
        Prototype p;
        p.mu = std::move(mu);
        p.var = var;
        p.kind = Kind::Thing;
        p.class_id = seed_class;
        p.instance_id = instance_id;
        p.center_row = row;
        p.center_col = col;
        return p;
    }
};

}  // namespace holoseg
