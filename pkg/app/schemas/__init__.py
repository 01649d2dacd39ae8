# Schemas package marker
