#pragma once

// Library-plugin contract. A plugin is a named table of routines; a routine
// runs collectively on every rank of the session's worker group, sees the
// session's matrices through a MatrixAccessor, and returns ordered Values.
// Rank 0's outputs are what the client receives.
//
// Plugins are bound at build/startup time through Server::register_plugin
// rather than loaded from shared objects; the dispatch contract (name-based
// routines, ordered serialized parameters, opaque matrix references) is the
// interface, not the loader.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "matbridge/comm.hpp"
#include "matbridge/distmatrix.hpp"
#include "matbridge/protocol.hpp"

namespace matbridge::plugin {

// One rank's view of its session's matrices during a routine call.
class MatrixAccessor {
public:
    virtual ~MatrixAccessor() = default;

    virtual dist::LocalBlock& block(const MatrixHandle& h) = 0;
    virtual const dist::LayoutDescriptor& layout(const MatrixHandle& h) = 0;

    // Creates a new session matrix, block-row distributed over the group.
    // Every rank must call create the same number of times in the same order
    // (ids are allocated deterministically from a per-call base). The routine
    // must fill the returned local block completely; the dispatcher marks
    // created matrices complete when the routine returns.
    virtual std::pair<MatrixHandle, dist::LocalBlock*> create(std::uint64_t m,
                                                              std::uint64_t n) = 0;
};

struct RoutineContext {
    MatrixAccessor& matrices;
    comm::WorkerGroup& group;
};

using Routine =
    std::function<std::vector<Value>(const std::vector<Value>& args, RoutineContext& ctx)>;

class LibraryPlugin {
public:
    virtual ~LibraryPlugin() = default;
    virtual const std::string& name() const = 0;
    virtual const Routine* find(const std::string& routine) const = 0;
    virtual std::vector<std::string> routine_names() const = 0;
};

// Plain routine-table plugin; enough for everything in this repository.
class TablePlugin : public LibraryPlugin {
public:
    explicit TablePlugin(std::string name) : name_(std::move(name)) {}

    void add(const std::string& routine, Routine fn) { table_[routine] = std::move(fn); }

    const std::string& name() const override { return name_; }

    const Routine* find(const std::string& routine) const override {
        auto it = table_.find(routine);
        return it == table_.end() ? nullptr : &it->second;
    }

    std::vector<std::string> routine_names() const override {
        std::vector<std::string> names;
        names.reserve(table_.size());
        for (const auto& [k, v] : table_) names.push_back(k);
        return names;
    }

private:
    std::string name_;
    std::map<std::string, Routine> table_;
};

// Argument helpers shared by plugin implementations: typed access with
// argument_error on mismatch.
const MatrixHandle& arg_handle(const std::vector<Value>& args, std::size_t i);
std::int64_t arg_int(const std::vector<Value>& args, std::size_t i);
double arg_float(const std::vector<Value>& args, std::size_t i);
void expect_arg_count(const std::vector<Value>& args, std::size_t n, const char* routine);

} // namespace matbridge::plugin
