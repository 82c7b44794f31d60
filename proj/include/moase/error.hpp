#pragma once

#include <stdexcept>
#include <string>

namespace moase {

/// Base of every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define MOASE_DEFINE_ERROR(Name)                 \
    class Name : public Error {                  \
    public:                                      \
        using Error::Error;                      \
    }

MOASE_DEFINE_ERROR(ShapeError);
MOASE_DEFINE_ERROR(NumericError);
MOASE_DEFINE_ERROR(UnsupportedOp);
MOASE_DEFINE_ERROR(SelectionError);
MOASE_DEFINE_ERROR(ConfigError);
MOASE_DEFINE_ERROR(ValidationError);
MOASE_DEFINE_ERROR(ReportError);
MOASE_DEFINE_ERROR(FormatError);

#undef MOASE_DEFINE_ERROR

/// Raised when source pretraining ends below the accuracy threshold.
class PretrainError : public Error {
public:
    PretrainError(const std::string& what, double final_accuracy)
        : Error(what), final_accuracy_(final_accuracy) {}

    double final_accuracy() const noexcept { return final_accuracy_; }

private:
    double final_accuracy_;
};

}  // namespace moase
